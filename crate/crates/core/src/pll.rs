//! Partial-label fine-tuning: a confidence-weighted loss and a
//! multiplicative confidence update that sharpens each candidate set.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, OptimError};
use crate::backbone::{self, BackboneError, BackboneParams, Phase};
use crate::container::{self, ContainerError};
use crate::datagen::{stream_rng, LabelSet, LabeledImageSet};
use crate::ssfe::PROB_FLOOR;
use crate::tensor::{softmax_in_place, softmax_rows, Tensor};

/// Row-sum tolerance for a valid confidence matrix.
pub const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PllError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("row {0} has an empty candidate set")]
    EmptyCandidates(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("row {0} lost all confidence mass")]
    Collapsed(usize),
    #[error("invalid confidence matrix: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Per-instance label confidences, zero outside each candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    classes: usize,
    values: Vec<f64>,
    masks: Vec<LabelSet>,
}

/// Uniform confidence over each candidate set.
pub fn init_confidence(masks: &[LabelSet]) -> Result<ConfidenceMatrix, PllError> {
    let classes = masks.first().map_or(0, LabelSet::classes);
    let mut values = vec![0.0; masks.len() * classes];
    for (i, (mask, row)) in masks.iter().zip(values.chunks_mut(classes.max(1))).enumerate() {
        if mask.classes() != classes {
            return Err(PllError::Shape(format!(
                "row {i} has {} classes, expected {classes}",
                mask.classes()
            )));
        }
        if mask.is_empty() {
            return Err(PllError::EmptyCandidates(i));
        }
        let share = 1.0 / mask.len() as f64;
        for j in mask.iter() {
            row[j] = share;
        }
    }
    Ok(ConfidenceMatrix {
        classes,
        values,
        masks: masks.to_vec(),
    })
}

impl ConfidenceMatrix {
    /// Builds a matrix from raw values and checks every invariant.
    pub fn from_parts(classes: usize, values: Vec<f64>, masks: Vec<LabelSet>) -> Result<Self, PllError> {
        if values.len() != masks.len() * classes {
            return Err(PllError::Shape(format!(
                "{} values for {} rows of {classes}",
                values.len(),
                masks.len()
            )));
        }
        let c = Self { classes, values, masks };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masks(&self) -> &[LabelSet] {
        &self.masks
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.classes.max(1)).take(self.len())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), self.classes], self.values.clone()).expect("matrix shape")
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            classes: self.classes,
            values,
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    /// Nonnegative, zero off-support, rows summing to one.
    pub fn validate(&self) -> Result<(), PllError> {
        for (i, (row, mask)) in self.rows().zip(&self.masks).enumerate() {
            if mask.classes() != self.classes {
                return Err(PllError::Invalid(format!("row {i} mask width {}", mask.classes())));
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(PllError::Invalid(format!("entry ({i}, {j}) = {v}")));
                }
                if v > 0.0 && !mask.contains(j) {
                    return Err(PllError::Invalid(format!("entry ({i}, {j}) outside candidates")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(PllError::Invalid(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn mean_row_max(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let total: f64 = self.rows().map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
        total / self.len() as f64
    }

    /// Lowest-index argmax of each row.
    pub fn argmax(&self) -> Vec<usize> {
        self.rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }

    /// Applies the update to `rows` using the matching rows of `input`
    /// (probabilities or logits, softmaxed here).
    pub fn update_rows(&mut self, rows: &[usize], input: &Tensor) -> Result<(), PllError> {
        let (n, q) = input.dims2().map_err(|e| PllError::Shape(e.to_string()))?;
        if n != rows.len() || q != self.classes {
            return Err(PllError::Shape(format!(
                "update input is {n}x{q} for {} rows of {}",
                rows.len(),
                self.classes
            )));
        }
        if !input.is_finite() {
            return Err(PllError::NonFinite("update input"));
        }
        let mut soft = vec![0.0; q];
        for (&i, src) in rows.iter().zip(input.rows()) {
            soft.copy_from_slice(src);
            softmax_in_place(&mut soft);
            let mask = &self.masks[i];
            let row = &mut self.values[i * q..(i + 1) * q];
            for (j, (c, s)) in row.iter_mut().zip(&soft).enumerate() {
                *c = if mask.contains(j) { *c * s } else { 0.0 };
            }
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(PllError::Collapsed(i));
            }
            row.iter_mut().for_each(|c| *c /= sum);
        }
        Ok(())
    }
}

/// `C_{t+1}`: product with the row softmax of `input`, restricted to the
/// candidates, rows renormalized.
pub fn update_confidence(c: &ConfidenceMatrix, input: &Tensor) -> Result<ConfidenceMatrix, PllError> {
    let mut next = c.clone();
    let all: Vec<usize> = (0..c.len()).collect();
    next.update_rows(&all, input)?;
    Ok(next)
}

fn check_probs(probs: &Tensor, c: &ConfidenceMatrix) -> Result<(usize, usize), PllError> {
    let (n, q) = probs.dims2().map_err(|e| PllError::Shape(e.to_string()))?;
    if n != c.len() || q != c.classes {
        return Err(PllError::Shape(format!(
            "probabilities {n}x{q} against confidences {}x{}",
            c.len(),
            c.classes
        )));
    }
    if n == 0 {
        return Err(PllError::Shape("empty batch".into()));
    }
    Ok((n, q))
}

/// Confidence-weighted negative log-likelihood averaged over rows.
pub fn loss_pl(probs: &Tensor, c: &ConfidenceMatrix) -> Result<f64, PllError> {
    let (n, _) = check_probs(probs, c)?;
    let mut total = 0.0;
    for (p, w) in probs.rows().zip(c.rows()) {
        for (pv, wv) in p.iter().zip(w) {
            if *wv > 0.0 {
                total -= wv * pv.max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// Gradient of [`loss_pl`] with respect to the logits behind `probs`.
pub fn loss_pl_grad(probs: &Tensor, c: &ConfidenceMatrix) -> Result<Tensor, PllError> {
    let (n, q) = check_probs(probs, c)?;
    let mut g = probs.clone();
    for (row, w) in g.data_mut().chunks_mut(q).zip(c.rows()) {
        let mass: f64 = w.iter().sum();
        for (gv, wv) in row.iter_mut().zip(w) {
            *gv = (*gv * mass - wv) / n as f64;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateInput {
    /// Softmax of the predicted probabilities.
    Probabilities,
    /// Softmax of the raw logits.
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cadence {
    /// Once per epoch from a full-dataset forward pass.
    Epoch,
    /// After every optimizer step, for the rows of that batch.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub update_input: UpdateInput,
    pub cadence: Cadence,
}

impl Default for PllConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            update_input: UpdateInput::Probabilities,
            cadence: Cadence::Epoch,
        }
    }
}

impl PllConfig {
    pub fn validate(&self) -> Result<(), PllError> {
        if self.batch_size == 0 {
            return Err(PllError::Config("batch size must be positive".into()));
        }
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
        .validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllEpoch {
    pub epoch: usize,
    pub loss_pl: f64,
    pub mean_max_confidence: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PllLog {
    pub epochs: Vec<PllEpoch>,
}

impl PllLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss_pl,mean_max_confidence,wall_ms\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss_pl, e.mean_max_confidence, e.wall_ms);
        }
        s
    }
}

const DOMAIN_SHUFFLE: u64 = 201;
const EVAL_CHUNK: usize = 256;

fn update_source(logits: &Tensor, mode: UpdateInput) -> Result<Tensor, PllError> {
    match mode {
        UpdateInput::Logits => Ok(logits.clone()),
        UpdateInput::Probabilities => softmax_rows(logits).map_err(|e| PllError::Shape(e.to_string())),
    }
}

pub fn finetune_pll(
    dataset: &LabeledImageSet,
    ssfe: &BackboneParams,
    cfg: &PllConfig,
) -> Result<(BackboneParams, ConfidenceMatrix, PllLog), PllError> {
    finetune_pll_observed(dataset, ssfe, cfg, |_, _| {})
}

/// As [`finetune_pll`], calling `observe(epoch, &C)` after each epoch's
/// confidence update.
pub fn finetune_pll_observed<F>(
    dataset: &LabeledImageSet,
    ssfe: &BackboneParams,
    cfg: &PllConfig,
    mut observe: F,
) -> Result<(BackboneParams, ConfidenceMatrix, PllLog), PllError>
where
    F: FnMut(usize, &ConfidenceMatrix),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PllError::EmptyDataset);
    }
    if ssfe.phase != Phase::Ssfe {
        return Err(BackboneError::Phase {
            expected: Phase::Ssfe,
            found: ssfe.phase,
        }
        .into());
    }
    let mut params = backbone::init_finetune(ssfe, cfg.seed)?;
    let mut conf = init_confidence(&dataset.candidates)?;
    let mut log = PllLog::default();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        params.trainable(),
    )?;
    let n = dataset.len();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, DOMAIN_SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let pass = backbone::forward_pll(&params, &dataset.batch(chunk))?;
            let probs = softmax_rows(&pass.logits).map_err(|e| PllError::Shape(e.to_string()))?;
            let batch_conf = conf.select_rows(chunk);
            let loss = loss_pl(&probs, &batch_conf)?;
            if !loss.is_finite() {
                return Err(PllError::NonFinite("partial-label loss"));
            }
            epoch_loss += loss * chunk.len() as f64 / n as f64;
            let grads = pass.backward(&loss_pl_grad(&probs, &batch_conf)?, None)?;
            opt.step(params.trainable_mut(), &grads)?;
            if cfg.cadence == Cadence::Step {
                conf.update_rows(chunk, &update_source(&pass.logits, cfg.update_input)?)?;
            }
        }
        if !params.is_finite() {
            return Err(PllError::NonFinite("parameters"));
        }
        if cfg.cadence == Cadence::Epoch {
            let logits = backbone::pll_logits_batched(&params, &dataset.all_images(), EVAL_CHUNK)?;
            conf = update_confidence(&conf, &update_source(&logits, cfg.update_input)?)?;
        }
        observe(epoch, &conf);
        log::debug!("pll epoch {epoch}: loss {epoch_loss:.5}, mean max confidence {:.4}", conf.mean_row_max());
        log.epochs.push(PllEpoch {
            epoch,
            loss_pl: epoch_loss,
            mean_max_confidence: conf.mean_row_max(),
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((params, conf, log))
}

pub const CONF_MAGIC: [u8; 4] = *b"PLCM";
pub const CONF_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfidenceHeader {
    n: usize,
    q: usize,
}

pub fn save_confidence(c: &ConfidenceMatrix, path: &Path) -> Result<(), PllError> {
    let mut body = Vec::new();
    container::push_f64s(&mut body, &c.values);
    for m in &c.masks {
        body.extend_from_slice(m.as_bytes());
    }
    let header = ConfidenceHeader {
        n: c.len(),
        q: c.classes,
    };
    Ok(container::write(path, CONF_MAGIC, CONF_VERSION, &header, &body)?)
}

pub fn load_confidence(path: &Path) -> Result<ConfidenceMatrix, PllError> {
    let (header, body): (ConfidenceHeader, _) = container::read(path, CONF_MAGIC, CONF_VERSION, |h: &ConfidenceHeader| {
        Ok(h.n * (h.q * 8 + LabelSet::byte_len(h.q)))
    })?;
    let split = header.n * header.q * 8;
    let values = container::take_f64s(&body[..split]);
    let width = LabelSet::byte_len(header.q);
    let masks = if width == 0 {
        vec![LabelSet::empty(header.q); header.n]
    } else {
        body[split..]
            .chunks(width)
            .map(|b| LabelSet::from_bytes(header.q, b))
            .collect()
    };
    ConfidenceMatrix::from_parts(header.q, values, masks)
}
