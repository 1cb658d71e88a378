//! Self-supervised feature enhancement: rotation classification with
//! confidence-based instance weights plus a rotation-irrelevance penalty.
//!
//! The weights `w` are recomputed from the current probabilities on every
//! forward pass and are treated as constants when differentiating.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, OptimError};
use crate::backbone::{self, Architecture, BackboneError, BackboneParams};
use crate::datagen::{rotate_square, stream_rng, LabeledImageSet};
use crate::tensor::{softmax_rows, Tensor};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SsfeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("rotation index {index} outside 1..={max}")]
    RotationIndex { index: usize, max: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Source images each stacked with all `R` rotated copies, source-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationBatch {
    /// `[B * R, 1, side, side]`
    pub images: Tensor,
    /// Rotation index in `1..=R` for each stacked image.
    pub rotation_labels: Vec<usize>,
    pub sources: Vec<usize>,
    pub rotations: usize,
}

impl RotationBatch {
    pub fn build(set: &LabeledImageSet, sources: &[usize], rotations: usize) -> Self {
        let side = set.side;
        let area = side * side;
        let mut data = vec![0.0; sources.len() * rotations * area];
        let mut labels = Vec::with_capacity(sources.len() * rotations);
        for (k, &src) in sources.iter().enumerate() {
            for r in 0..rotations {
                let at = (k * rotations + r) * area;
                rotate_square(set.image(src), side, r, &mut data[at..at + area]);
                labels.push(r + 1);
            }
        }
        Self {
            images: Tensor::new(&[sources.len() * rotations, 1, side, side], data)
                .expect("rotation batch shape"),
            rotation_labels: labels,
            sources: sources.to_vec(),
            rotations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    SquaredEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsfeConfig {
    pub alpha: f64,
    pub rotations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub distance: Distance,
}

impl Default for SsfeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            rotations: 4,
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            distance: Distance::SquaredEuclidean,
        }
    }
}

impl SsfeConfig {
    pub fn validate(&self) -> Result<(), SsfeError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SsfeError::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.rotations < 2 || self.rotations > 4 {
            return Err(SsfeError::Config(format!(
                "rotations must be 2..=4 quarter turns, got {}",
                self.rotations
            )));
        }
        if self.batch_size == 0 {
            return Err(SsfeError::Config("batch size must be positive".into()));
        }
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()?;
        Ok(())
    }
}

/// Row-wise softmax of rotation logits.
pub fn rotation_probs(logits: &Tensor) -> Result<Tensor, SsfeError> {
    if !logits.is_finite() {
        return Err(SsfeError::NonFinite("rotation logits"));
    }
    softmax_rows(logits).map_err(|e| SsfeError::Shape(e.to_string()))
}

/// `w = 1` for the original (`r = 1`), otherwise `1 - P` at the row's
/// rotation class.
pub fn rotation_weights(probs: &Tensor, rotation_index: &[usize]) -> Result<Vec<f64>, SsfeError> {
    let (rows, cols) = probs.dims2().map_err(|e| SsfeError::Shape(e.to_string()))?;
    if rows != rotation_index.len() {
        return Err(SsfeError::Shape(format!(
            "{rows} probability rows for {} rotation indices",
            rotation_index.len()
        )));
    }
    probs
        .rows()
        .zip(rotation_index)
        .map(|(row, &r)| match r {
            1 => Ok(1.0),
            r if r <= cols && r > 1 => Ok((1.0 - row[r - 1]).clamp(0.0, 1.0)),
            r => Err(SsfeError::RotationIndex { index: r, max: cols }),
        })
        .collect()
}

fn check_labels(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(usize, usize), SsfeError> {
    let (rows, cols) = probs.dims2().map_err(|e| SsfeError::Shape(e.to_string()))?;
    if labels.len() != rows || weights.len() != rows {
        return Err(SsfeError::Shape(format!(
            "{rows} rows, {} labels, {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if rows == 0 {
        return Err(SsfeError::Shape("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&z| z == 0 || z > cols) {
        return Err(SsfeError::RotationIndex { index: bad, max: cols });
    }
    Ok((rows, cols))
}

/// Weighted rotation cross-entropy averaged over all `N * R` rows.
/// Labels are rotation indices in `1..=R`.
pub fn loss_rc(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<f64, SsfeError> {
    let (rows, _) = check_labels(probs, labels, weights)?;
    let total: f64 = probs
        .rows()
        .zip(labels)
        .zip(weights)
        .map(|((row, &z), &w)| -w * row[z - 1].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / rows as f64)
}

/// Gradient of [`loss_rc`] with respect to the logits, weights held fixed.
pub fn loss_rc_grad(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<Tensor, SsfeError> {
    let (rows, cols) = check_labels(probs, labels, weights)?;
    let scale = 1.0 / rows as f64;
    let mut g = probs.clone();
    for ((row, &z), &w) in g.data_mut().chunks_mut(cols).zip(labels).zip(weights) {
        for v in row.iter_mut() {
            *v *= w * scale;
        }
        row[z - 1] -= w * scale;
    }
    Ok(g)
}

fn ri_dims(features: &Tensor) -> Result<(usize, usize, usize), SsfeError> {
    match features.shape() {
        [n, r, d] if *r >= 2 => Ok((*n, *r, *d)),
        s => Err(SsfeError::Shape(format!(
            "rotation-irrelevance features must be [N, R >= 2, D], got {s:?}"
        ))),
    }
}

fn group_mean(group: &[f64], r: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for copy in group.chunks(d) {
        for (m, v) in mean.iter_mut().zip(copy) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    mean
}

/// Mean squared Euclidean distance of each rotated copy's features from the
/// per-instance mean. `features` is `[N, R, D]`.
pub fn loss_ri(features: &Tensor) -> Result<f64, SsfeError> {
    let (n, r, d) = ri_dims(features)?;
    if n == 0 {
        return Err(SsfeError::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    for group in features.data().chunks(r * d) {
        let mean = group_mean(group, r, d);
        for copy in group.chunks(d) {
            total += copy.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
        }
    }
    Ok(total / (n * r) as f64)
}

/// Gradient of [`loss_ri`]: `2 (h - mean) / (N R)`. The mean's own
/// dependence on `h` cancels because deviations sum to zero.
pub fn loss_ri_grad(features: &Tensor) -> Result<Tensor, SsfeError> {
    let (n, r, d) = ri_dims(features)?;
    let scale = 2.0 / (n * r).max(1) as f64;
    let mut g = features.clone();
    for group in g.data_mut().chunks_mut(r * d) {
        let mean = group_mean(group, r, d);
        for copy in group.chunks_mut(d) {
            for (v, m) in copy.iter_mut().zip(&mean) {
                *v = scale * (*v - m);
            }
        }
    }
    Ok(g)
}

pub fn loss_ssfe(l_rc: f64, l_ri: f64, alpha: f64) -> f64 {
    alpha * l_rc + (1.0 - alpha) * l_ri
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub l_rc: f64,
    pub l_ri: f64,
    pub l_ssfe: f64,
}

/// Forward pass, combined loss and parameter gradients for one batch.
pub fn batch_loss_and_grads(
    params: &BackboneParams,
    batch: &RotationBatch,
    alpha: f64,
) -> Result<(BatchLoss, Vec<Tensor>), SsfeError> {
    let pass = backbone::forward_ssfe(params, &batch.images)?;
    let probs = rotation_probs(&pass.logits)?;
    let weights = rotation_weights(&probs, &batch.rotation_labels)?;
    let l_rc = loss_rc(&probs, &batch.rotation_labels, &weights)?;
    let g_logits = loss_rc_grad(&probs, &batch.rotation_labels, &weights)?.scale(alpha);

    let d = pass.features.h_ri.shape()[1];
    let grouped = pass
        .features
        .h_ri
        .clone()
        .reshape(&[batch.sources.len(), batch.rotations, d])
        .map_err(|e| SsfeError::Shape(e.to_string()))?;
    let l_ri = loss_ri(&grouped)?;
    let g_ri = loss_ri_grad(&grouped)?
        .scale(1.0 - alpha)
        .reshape(&[batch.sources.len() * batch.rotations, d])
        .expect("same size");

    let grads = pass.backward(&g_logits, Some(&g_ri))?;
    let loss = BatchLoss {
        l_rc,
        l_ri,
        l_ssfe: loss_ssfe(l_rc, l_ri, alpha),
    };
    if !loss.l_ssfe.is_finite() {
        return Err(SsfeError::NonFinite("pretext loss"));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsfeEpoch {
    pub epoch: usize,
    pub l_rc: f64,
    pub l_ri: f64,
    pub l_ssfe: f64,
    pub wall_ms: u64,
}

/// One row per epoch. Row 0 evaluates the initial parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SsfeLog {
    pub epochs: Vec<SsfeEpoch>,
}

impl SsfeLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_rc,l_ri,l_ssfe,wall_ms\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.l_rc, e.l_ri, e.l_ssfe, e.wall_ms);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, csv::Error> {
        let epochs = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<_, _>>()?;
        Ok(Self { epochs })
    }

    /// Losses only, for comparing runs.
    pub fn losses(&self) -> Vec<(f64, f64, f64)> {
        self.epochs.iter().map(|e| (e.l_rc, e.l_ri, e.l_ssfe)).collect()
    }
}

const DOMAIN_SHUFFLE: u64 = 101;

fn sweep<F>(n: usize, batch: usize, order: &[usize], mut f: F) -> Result<(f64, f64, f64), SsfeError>
where
    F: FnMut(&[usize]) -> Result<BatchLoss, SsfeError>,
{
    let (mut rc, mut ri, mut total) = (0.0, 0.0, 0.0);
    for chunk in order.chunks(batch) {
        let loss = f(chunk)?;
        let share = chunk.len() as f64 / n as f64;
        rc += share * loss.l_rc;
        ri += share * loss.l_ri;
        total += share * loss.l_ssfe;
    }
    Ok((rc, ri, total))
}

/// Mini-batch pretext training from a fresh initialization seeded by
/// `cfg.seed`.
pub fn train_ssfe(dataset: &LabeledImageSet, cfg: &SsfeConfig) -> Result<(BackboneParams, SsfeLog), SsfeError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(SsfeError::EmptyDataset);
    }
    let arch = Architecture {
        side: dataset.side,
        rotations: cfg.rotations,
        ..Architecture::standard(dataset.classes)
    };
    let mut params = BackboneParams::init(arch, cfg.seed);
    let n = dataset.len();
    let mut log = SsfeLog::default();

    let started = Instant::now();
    let order: Vec<usize> = (0..n).collect();
    let (rc, ri, total) = sweep(n, cfg.batch_size, &order, |chunk| {
        let batch = RotationBatch::build(dataset, chunk, cfg.rotations);
        Ok(batch_loss_and_grads(&params, &batch, cfg.alpha)?.0)
    })?;
    log.epochs.push(SsfeEpoch {
        epoch: 0,
        l_rc: rc,
        l_ri: ri,
        l_ssfe: total,
        wall_ms: started.elapsed().as_millis() as u64,
    });

    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        params.trainable(),
    )?;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, DOMAIN_SHUFFLE, epoch as u64));
        let (rc, ri, total) = sweep(n, cfg.batch_size, &order, |chunk| {
            let batch = RotationBatch::build(dataset, chunk, cfg.rotations);
            let (loss, grads) = batch_loss_and_grads(&params, &batch, cfg.alpha)?;
            opt.step(params.trainable_mut(), &grads)?;
            Ok(loss)
        })?;
        if !params.is_finite() {
            return Err(SsfeError::NonFinite("parameters"));
        }
        log::debug!("ssfe epoch {epoch}: l_rc {rc:.5} l_ri {ri:.5} l_ssfe {total:.5}");
        log.epochs.push(SsfeEpoch {
            epoch,
            l_rc: rc,
            l_ri: ri,
            l_ssfe: total,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_difference;
    use crate::datagen::{generate_id_dataset, GlyphSpec};

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn probs_closed_forms() {
        let p = rotation_probs(&row(&[0.0; 4])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        let p = rotation_probs(&row(&[2f64.ln(), 0.0, 0.0, 0.0])).unwrap();
        for (a, b) in p.data().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(rotation_probs(&row(&[f64::NAN, 0.0])), Err(SsfeError::NonFinite(_))));
    }

    #[test]
    fn probs_match_direct_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = rotation_probs(&row(&logits)).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (a, l) in p.data().iter().zip(&logits) {
            assert!((a - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_cases() {
        let uniform = Tensor::full(&[4, 4], 0.25);
        assert_eq!(rotation_weights(&uniform, &[1, 2, 3, 4]).unwrap(), vec![1.0, 0.75, 0.75, 0.75]);
        let skewed = row(&[0.7, 0.1, 0.1, 0.1]);
        assert_eq!(rotation_weights(&skewed, &[1]).unwrap(), vec![1.0]);
        assert!(matches!(
            rotation_weights(&uniform, &[1, 2, 3, 5]),
            Err(SsfeError::RotationIndex { index: 5, .. })
        ));
        assert!(matches!(
            rotation_weights(&uniform, &[0, 2, 3, 4]),
            Err(SsfeError::RotationIndex { index: 0, .. })
        ));
    }

    #[test]
    fn rc_hand_case() {
        // rows of R = 2 copies; correct-class probability 0.5 in both
        let probs = Tensor::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let loss = loss_rc(&probs, &[1, 2], &[1.0, 0.5]).unwrap();
        let expected = 0.5 * (1.0 * 2f64.ln() + 0.5 * 2f64.ln());
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.5199).abs() < 1e-4);
    }

    #[test]
    fn rc_is_zero_for_perfect_predictions_and_linear_in_weights() {
        let probs = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(loss_rc(&probs, &[1, 2], &[1.0, 0.3]).unwrap(), 0.0);
        let probs = Tensor::new(&[2, 2], vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        let a = loss_rc(&probs, &[1, 2], &[1.0, 0.3]).unwrap();
        let b = loss_rc(&probs, &[1, 2], &[2.0, 0.6]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn rc_floors_zero_probability() {
        let probs = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let loss = loss_rc(&probs, &[1], &[1.0]).unwrap();
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn ri_hand_case_and_scaling() {
        let h = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((loss_ri(&h).unwrap() - 0.5).abs() < 1e-15);
        let same = Tensor::new(&[1, 3, 2], vec![0.3, 0.1, 0.3, 0.1, 0.3, 0.1]).unwrap();
        assert!(loss_ri(&same).unwrap() < 1e-30);
        let scaled = h.scale(3.0);
        assert!((loss_ri(&scaled).unwrap() - 9.0 * 0.5).abs() < 1e-12);
        assert!(loss_ri(&Tensor::zeros(&[2, 1, 3])).is_err());
    }

    #[test]
    fn combined_loss_endpoints() {
        assert_eq!(loss_ssfe(0.52, 0.5, 1.0), 0.52);
        assert_eq!(loss_ssfe(0.52, 0.5, 0.0), 0.5);
        assert!((loss_ssfe(0.52, 0.5, 0.5) - 0.51).abs() < 1e-15);
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::new(&[8, 4], (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 4 + 1).collect();
        let weights = rotation_weights(&rotation_probs(&logits).unwrap(), &labels).unwrap();
        let probs = rotation_probs(&logits).unwrap();
        let analytic = loss_rc_grad(&probs, &labels, &weights).unwrap();
        let numeric = finite_difference(&[logits.clone()], 1e-6, |t| {
            loss_rc(&rotation_probs(&t[0]).unwrap(), &labels, &weights).unwrap()
        });
        assert!(analytic.max_abs_diff(&numeric[0]) < 1e-8);

        let h = Tensor::new(&[2, 4, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let analytic = loss_ri_grad(&h).unwrap();
        let numeric = finite_difference(&[h.clone()], 1e-6, |t| loss_ri(&t[0]).unwrap());
        assert!(analytic.max_abs_diff(&numeric[0]) < 1e-8);
    }

    #[test]
    fn rotation_batch_layout() {
        let spec = GlyphSpec::standard(6, 0.1).unwrap();
        let set = generate_id_dataset(&spec, 12, 0).unwrap();
        let b = RotationBatch::build(&set, &[3, 5], 4);
        assert_eq!(b.images.shape(), &[8, 1, 16, 16]);
        assert_eq!(b.rotation_labels, vec![1, 2, 3, 4, 1, 2, 3, 4]);
        assert_eq!(&b.images.data()[..256], set.image(3));
        assert_eq!(&b.images.data()[4 * 256..5 * 256], set.image(5));
        let turned = crate::datagen::rotate(&set.batch(&[5]), 3).unwrap();
        assert_eq!(&b.images.data()[6 * 256..7 * 256], turned.data());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let spec = GlyphSpec::standard(6, 0.1).unwrap();
        let set = generate_id_dataset(&spec, 12, 0).unwrap();
        let cfg = SsfeConfig {
            epochs: 0,
            seed: 5,
            ..SsfeConfig::default()
        };
        let (params, log) = train_ssfe(&set, &cfg).unwrap();
        let init = BackboneParams::init(Architecture::standard(6), 5);
        assert_eq!(params, init);
        assert_eq!(log.epochs.len(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = SsfeConfig {
            alpha: 1.5,
            ..SsfeConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SsfeError::Config(_))));
        let spec = GlyphSpec::standard(6, 0.1).unwrap();
        let mut empty = generate_id_dataset(&spec, 6, 0).unwrap();
        empty.pixels.clear();
        empty.true_labels.clear();
        empty.candidates.clear();
        assert!(matches!(
            train_ssfe(&empty, &SsfeConfig::default()),
            Err(SsfeError::EmptyDataset)
        ));
    }
}
