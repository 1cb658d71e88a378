//! The small convolutional model shared by both training phases.
//!
//! ```text
//! image [B,1,16,16]
//!   -> conv3x3(1->8) -> relu -> maxpool2
//!   -> conv3x3(8->16) -> relu -> maxpool2 -> flatten [B,256]
//!   -> relu(affine -> 32) = h_rc      relu(affine -> 32) = h_ri
//! h_ssfe = [h_rc, h_ri]
//! rotation head: affine(h_rc) -> R logits      (pretext phase)
//! label head:    affine(h_ssfe) -> q logits    (partial-label phase)
//! ```
//!
//! Both heads read the same extractor. During fine-tuning the rotation head
//! is carried along untouched.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::container::{self, ContainerError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("operation needs {expected} parameters, found {found}")]
    Phase { expected: Phase, found: Phase },
    #[error("expected images shaped [B, 1, {side}, {side}], got {shape:?}")]
    ImageShape { side: usize, shape: Vec<usize> },
    #[error("expected features shaped [B, {width}], got {shape:?}")]
    FeatureShape { width: usize, shape: Vec<usize> },
    #[error("checkpoint does not match its architecture: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Extractor, projection heads and rotation classifier.
    Ssfe,
    /// Fine-tuned extractor, projection heads and label classifier.
    Pll,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ssfe => "ssfe",
            Phase::Pll => "pll",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub side: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub feature_dim: usize,
    pub rotations: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn standard(classes: usize) -> Self {
        Self {
            side: 16,
            conv1: 8,
            conv2: 16,
            feature_dim: 32,
            rotations: 4,
            classes,
        }
    }

    /// Width of the flattened extractor output.
    pub fn flat_dim(&self) -> usize {
        self.conv2 * (self.side / 4) * (self.side / 4)
    }

    fn shapes(&self, phase: Phase) -> Vec<(&'static str, Vec<usize>)> {
        let (f, flat) = (self.feature_dim, self.flat_dim());
        let mut v = vec![
            ("conv1.w", vec![self.conv1, 1, 3, 3]),
            ("conv1.b", vec![self.conv1]),
            ("conv2.w", vec![self.conv2, self.conv1, 3, 3]),
            ("conv2.b", vec![self.conv2]),
            ("rc.w", vec![flat, f]),
            ("rc.b", vec![f]),
            ("ri.w", vec![flat, f]),
            ("ri.b", vec![f]),
        ];
        let rot = [
            ("rot.w", vec![f, self.rotations]),
            ("rot.b", vec![self.rotations]),
        ];
        match phase {
            Phase::Ssfe => v.extend(rot),
            Phase::Pll => {
                v.push(("pll.w", vec![2 * f, self.classes]));
                v.push(("pll.b", vec![self.classes]));
                v.extend(rot);
            }
        }
        v
    }
}

/// Trainable tensors come first; in the `Pll` phase the frozen rotation
/// head follows them.
const TRAINABLE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub arch: Architecture,
    pub phase: Phase,
    pub seed: u64,
    names: Vec<&'static str>,
    tensors: Vec<Tensor>,
}

/// Per-instance features from the two projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub h_rc: Tensor,
    pub h_ri: Tensor,
    /// `h_rc` followed by `h_ri`.
    pub h_ssfe: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl BackboneParams {
    /// Fresh pretext-phase parameters: He-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.shapes(Phase::Ssfe);
        let tensors = shapes
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".b") {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = match shape.len() {
                    4 => shape[1] * 9,
                    _ => shape[0],
                };
                uniform(&mut rng, shape, (6.0 / fan_in as f64).sqrt())
            })
            .collect();
        Self {
            arch,
            phase: Phase::Ssfe,
            seed,
            names: shapes.iter().map(|(n, _)| *n).collect(),
            tensors,
        }
    }

    /// Builds a parameter bundle from explicit tensors in declared order.
    pub fn from_tensors(arch: Architecture, phase: Phase, seed: u64, tensors: Vec<Tensor>) -> Result<Self, BackboneError> {
        let shapes = arch.shapes(phase);
        if shapes.len() != tensors.len() {
            return Err(BackboneError::Checkpoint(format!(
                "{} tensors for {} slots",
                tensors.len(),
                shapes.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(BackboneError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(BackboneError::Checkpoint(format!("{name} is not finite")));
            }
        }
        Ok(Self {
            arch,
            phase,
            seed,
            names: shapes.iter().map(|(n, _)| *n).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Names of the tensors updated by training in the current phase.
    pub fn trainable_names(&self) -> &[&'static str] {
        &self.names[..TRAINABLE]
    }

    pub fn trainable(&self) -> &[Tensor] {
        &self.tensors[..TRAINABLE]
    }

    pub fn trainable_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors[..TRAINABLE]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn expect_phase(&self, expected: Phase) -> Result<(), BackboneError> {
        if self.phase != expected {
            return Err(BackboneError::Phase {
                expected,
                found: self.phase,
            });
        }
        Ok(())
    }

    fn check_images(&self, images: &Tensor) -> Result<(), BackboneError> {
        let s = self.arch.side;
        match images.shape() {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            shape => Err(BackboneError::ImageShape {
                side: s,
                shape: shape.to_vec(),
            }),
        }
    }

    fn bindings<'a>(&'a self, images: &'a Tensor, head: Head) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        let used = head.tensor_count(self.phase);
        self.names
            .iter()
            .zip(&self.tensors)
            .take(used)
            .map(|(n, t)| (*n, t))
            .chain(std::iter::once(("images", images)))
    }

    /// SHA-256 over architecture, phase and every parameter value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(self.arch, self.phase)).expect("serializable"));
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Features,
    Rotation,
    Label,
}

impl Head {
    fn tensor_count(self, phase: Phase) -> usize {
        match (self, phase) {
            (Head::Features, _) => 8,
            (Head::Rotation, Phase::Ssfe) | (Head::Label, Phase::Pll) => TRAINABLE,
            _ => unreachable!("head/phase mismatch is rejected earlier"),
        }
    }
}

fn build_graph(head: Head, names: &[&'static str]) -> Result<Graph, GraphError> {
    let mut g = Graph::new();
    let images = g.input("images")?;
    let used = head.tensor_count(if head == Head::Label {
        Phase::Pll
    } else {
        Phase::Ssfe
    });
    let p: Vec<NodeId> = names[..used]
        .iter()
        .map(|n| g.param(n))
        .collect::<Result<_, _>>()?;
    let c1 = g.conv3x3(images, p[0], p[1]);
    let a1 = g.relu(c1);
    let m1 = g.max_pool2(a1);
    let c2 = g.conv3x3(m1, p[2], p[3]);
    let a2 = g.relu(c2);
    let m2 = g.max_pool2(a2);
    let flat = g.flatten(m2);
    let rc = g.affine(flat, p[4], p[5]);
    let h_rc = g.relu(rc);
    let ri = g.affine(flat, p[6], p[7]);
    let h_ri = g.relu(ri);
    let h_ssfe = g.concat(&[h_rc, h_ri]);
    g.mark_output("h_rc", h_rc);
    g.mark_output("h_ri", h_ri);
    g.mark_output("h_ssfe", h_ssfe);
    match head {
        Head::Features => {}
        Head::Rotation => {
            let logits = g.affine(h_rc, p[8], p[9]);
            g.mark_output("logits", logits);
        }
        Head::Label => {
            let logits = g.affine(h_ssfe, p[8], p[9]);
            g.mark_output("logits", logits);
        }
    }
    Ok(g)
}

/// An evaluated forward pass that can be differentiated.
#[derive(Debug)]
pub struct ForwardPass {
    graph: Graph,
    pub features: FeaturePair,
    pub logits: Tensor,
}

impl ForwardPass {
    /// Gradients of the trainable tensors (declared order) given seeds for
    /// the logits and optionally for `h_ri`.
    pub fn backward(&self, logits_seed: &Tensor, h_ri_seed: Option<&Tensor>) -> Result<Vec<Tensor>, BackboneError> {
        let logits = self.graph.output_id("logits").expect("logits node");
        let mut seeds = vec![(logits, logits_seed)];
        if let Some(seed) = h_ri_seed {
            seeds.push((self.graph.output_id("h_ri").expect("h_ri node"), seed));
        }
        let mut grads = self.graph.backward_many(&seeds)?;
        Ok(self
            .graph
            .param_names()
            .iter()
            .map(|n| grads.remove(n).expect("gradient for every param"))
            .collect())
    }
}

fn run(params: &BackboneParams, images: &Tensor, head: Head) -> Result<(Graph, FeaturePair, Option<Tensor>), BackboneError> {
    params.check_images(images)?;
    let mut g = build_graph(head, &params.names)?;
    let mut out = g.evaluate(params.bindings(images, head))?;
    let features = FeaturePair {
        h_rc: out.remove("h_rc").expect("h_rc"),
        h_ri: out.remove("h_ri").expect("h_ri"),
        h_ssfe: out.remove("h_ssfe").expect("h_ssfe"),
    };
    Ok((g, features, out.remove("logits")))
}

pub fn extract_features(params: &BackboneParams, images: &Tensor) -> Result<FeaturePair, BackboneError> {
    Ok(run(params, images, Head::Features)?.1)
}

/// Pretext forward pass: features and rotation logits.
pub fn forward_ssfe(params: &BackboneParams, images: &Tensor) -> Result<ForwardPass, BackboneError> {
    params.expect_phase(Phase::Ssfe)?;
    let (graph, features, logits) = run(params, images, Head::Rotation)?;
    Ok(ForwardPass {
        graph,
        features,
        logits: logits.expect("rotation logits"),
    })
}

/// Partial-label forward pass: features and label logits.
pub fn forward_pll(params: &BackboneParams, images: &Tensor) -> Result<ForwardPass, BackboneError> {
    params.expect_phase(Phase::Pll)?;
    let (graph, features, logits) = run(params, images, Head::Label)?;
    Ok(ForwardPass {
        graph,
        features,
        logits: logits.expect("label logits"),
    })
}

fn affine_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, BackboneError> {
    let width = w.shape()[0];
    let (rows, cols) = x.dims2().map_err(|_| BackboneError::FeatureShape {
        width,
        shape: x.shape().to_vec(),
    })?;
    if cols != width {
        return Err(BackboneError::FeatureShape {
            width,
            shape: x.shape().to_vec(),
        });
    }
    let out_dim = w.shape()[1];
    let mut data = Vec::with_capacity(rows * out_dim);
    for row in x.rows() {
        for k in 0..out_dim {
            let dot: f64 = row.iter().enumerate().map(|(j, v)| v * w.data()[j * out_dim + k]).sum();
            data.push(dot + b.data()[k]);
        }
    }
    Ok(Tensor::new(&[rows, out_dim], data).expect("affine shape"))
}

/// Rotation logits from `h_rc` features: an affine map, no activation.
pub fn rotation_logits(params: &BackboneParams, h_rc: &Tensor) -> Result<Tensor, BackboneError> {
    params.expect_phase(Phase::Ssfe)?;
    affine_rows(h_rc, params.get("rot.w").expect("rot.w"), params.get("rot.b").expect("rot.b"))
}

/// Label logits from `h_ssfe` features.
pub fn pll_logits_from_features(params: &BackboneParams, h_ssfe: &Tensor) -> Result<Tensor, BackboneError> {
    params.expect_phase(Phase::Pll)?;
    affine_rows(h_ssfe, params.get("pll.w").expect("pll.w"), params.get("pll.b").expect("pll.b"))
}

pub fn pll_logits(params: &BackboneParams, images: &Tensor) -> Result<Tensor, BackboneError> {
    Ok(forward_pll(params, images)?.logits)
}

/// Label logits for many images, evaluated in chunks.
pub fn pll_logits_batched(params: &BackboneParams, images: &Tensor, chunk: usize) -> Result<Tensor, BackboneError> {
    params.expect_phase(Phase::Pll)?;
    params.check_images(images)?;
    let n = images.shape()[0];
    let area = params.arch.side * params.arch.side;
    let mut data = Vec::with_capacity(n * params.arch.classes);
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let part = Tensor::new(
            &[end - start, 1, params.arch.side, params.arch.side],
            images.data()[start * area..end * area].to_vec(),
        )
        .expect("chunk shape");
        data.extend_from_slice(pll_logits(params, &part)?.data());
    }
    Ok(Tensor::new(&[n, params.arch.classes], data).expect("logits shape"))
}

/// Copies extractor and heads into a label-phase bundle with a fresh label
/// classifier drawn uniformly from `[-0.05, 0.05]`.
pub fn init_finetune(ssfe: &BackboneParams, seed: u64) -> Result<BackboneParams, BackboneError> {
    ssfe.expect_phase(Phase::Ssfe)?;
    let arch = ssfe.arch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors: Vec<Tensor> = ssfe.tensors[..8].to_vec();
    tensors.push(uniform(&mut rng, &[2 * arch.feature_dim, arch.classes], 0.05));
    tensors.push(uniform(&mut rng, &[arch.classes], 0.05));
    tensors.extend(ssfe.tensors[8..].iter().cloned());
    BackboneParams::from_tensors(arch, Phase::Pll, seed, tensors)
}

const CKPT_MAGIC: [u8; 4] = *b"PLCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: Architecture,
    phase: Phase,
    seed: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint(params: &BackboneParams, path: &Path) -> Result<(), BackboneError> {
    let header = CheckpointHeader {
        architecture: params.arch,
        phase: params.phase,
        seed: params.seed,
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let mut body = Vec::new();
    for t in &params.tensors {
        container::push_f64s(&mut body, t.data());
    }
    Ok(container::write(path, CKPT_MAGIC, CKPT_VERSION, &header, &body)?)
}

pub fn load_checkpoint(path: &Path) -> Result<BackboneParams, BackboneError> {
    let (header, body): (CheckpointHeader, _) = container::read(path, CKPT_MAGIC, CKPT_VERSION, |h: &CheckpointHeader| {
        Ok(h.tensors.iter().map(|(_, s)| s.iter().product::<usize>() * 8).sum())
    })?;
    let expected = header.architecture.shapes(header.phase);
    let names_match = expected.len() == header.tensors.len()
        && expected.iter().zip(&header.tensors).all(|((n, _), (m, _))| n == m);
    if !names_match {
        return Err(BackboneError::Checkpoint("tensor names out of order".into()));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (_, shape) in &header.tensors {
        let len = shape.iter().product::<usize>() * 8;
        let data = container::take_f64s(&body[offset..offset + len]);
        tensors.push(Tensor::new(shape, data).expect("checkpoint tensor"));
        offset += len;
    }
    BackboneParams::from_tensors(header.architecture, header.phase, header.seed, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, Adam, AdamConfig};
    use rand::Rng;

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[n, 1, 16, 16], (0..n * 256).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            side: 4,
            conv1: 2,
            conv2: 2,
            feature_dim: 3,
            rotations: 4,
            classes: 3,
        }
    }

    #[test]
    fn identical_images_give_identical_features() {
        let p = BackboneParams::init(Architecture::standard(6), 1);
        let one = random_images(1, 3);
        let two = Tensor::new(&[2, 1, 16, 16], [one.data(), one.data()].concat()).unwrap();
        let f = extract_features(&p, &two).unwrap();
        assert_eq!(f.h_ssfe.row(0), f.h_ssfe.row(1));
    }

    #[test]
    fn zero_image_with_zero_biases_has_zero_features() {
        let p = BackboneParams::init(Architecture::standard(6), 1);
        let f = extract_features(&p, &Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(f.h_ssfe.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h_ssfe_is_the_concatenation() {
        let p = BackboneParams::init(Architecture::standard(6), 2);
        let f = extract_features(&p, &random_images(3, 4)).unwrap();
        for i in 0..3 {
            assert_eq!(&f.h_ssfe.row(i)[..32], f.h_rc.row(i));
            assert_eq!(&f.h_ssfe.row(i)[32..], f.h_ri.row(i));
        }
    }

    #[test]
    fn features_are_batch_permutation_equivariant() {
        let p = BackboneParams::init(Architecture::standard(6), 2);
        let imgs = random_images(3, 8);
        let f = extract_features(&p, &imgs).unwrap();
        let perm = [2, 0, 1];
        let mut data = Vec::new();
        for &i in &perm {
            data.extend_from_slice(&imgs.data()[i * 256..(i + 1) * 256]);
        }
        let g = extract_features(&p, &Tensor::new(&[3, 1, 16, 16], data).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(g.h_ssfe.row(k), f.h_ssfe.row(i));
        }
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let p = BackboneParams::init(Architecture::standard(6), 2);
        let err = extract_features(&p, &Tensor::zeros(&[1, 1, 8, 8])).unwrap_err();
        assert!(matches!(err, BackboneError::ImageShape { .. }));
    }

    fn one_by_one(phase: Phase) -> BackboneParams {
        let arch = Architecture {
            side: 4,
            conv1: 1,
            conv2: 1,
            feature_dim: 1,
            rotations: 1,
            classes: 1,
        };
        let mut p = BackboneParams::init(arch, 0);
        if phase == Phase::Pll {
            p = init_finetune(&p, 0).unwrap();
        }
        p
    }

    #[test]
    fn rotation_logits_contract() {
        let mut p = BackboneParams::init(Architecture::standard(6), 5);
        p.get_mut("rot.w").unwrap().data_mut().fill(0.0);
        let h = extract_features(&p, &random_images(2, 1)).unwrap().h_rc;
        let logits = rotation_logits(&p, &h).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));

        // hand case: 2 * 3 + 1 = 7
        let mut p = one_by_one(Phase::Ssfe);
        p.get_mut("rot.w").unwrap().data_mut()[0] = 3.0;
        p.get_mut("rot.b").unwrap().data_mut()[0] = 1.0;
        let h = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        assert_eq!(rotation_logits(&p, &h).unwrap().data(), &[7.0]);

        let pll = one_by_one(Phase::Pll);
        assert!(matches!(rotation_logits(&pll, &h), Err(BackboneError::Phase { .. })));
    }

    #[test]
    fn rotation_logits_follow_batch_order() {
        let p = BackboneParams::init(Architecture::standard(6), 5);
        let h = extract_features(&p, &random_images(3, 2)).unwrap().h_rc;
        let logits = rotation_logits(&p, &h).unwrap();
        let swapped = h.select_rows(&[2, 1, 0]).unwrap();
        let l2 = rotation_logits(&p, &swapped).unwrap();
        assert_eq!(l2.row(0), logits.row(2));
        assert_eq!(l2.row(2), logits.row(0));
    }

    #[test]
    fn pll_logits_contract() {
        // zero map
        let mut p = init_finetune(&BackboneParams::init(Architecture::standard(6), 5), 1).unwrap();
        p.get_mut("pll.w").unwrap().data_mut().fill(0.0);
        p.get_mut("pll.b").unwrap().data_mut().fill(0.0);
        assert!(pll_logits(&p, &random_images(2, 1)).unwrap().data().iter().all(|&v| v == 0.0));

        // hand case: [2, 0] . [3, 5] + 1 = 7
        let mut p = one_by_one(Phase::Pll);
        p.get_mut("pll.w").unwrap().data_mut().copy_from_slice(&[3.0, 5.0]);
        p.get_mut("pll.b").unwrap().data_mut()[0] = 1.0;
        let h = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        assert_eq!(pll_logits_from_features(&p, &h).unwrap().data(), &[7.0]);

        // batch order
        let p = init_finetune(&BackboneParams::init(Architecture::standard(6), 5), 1).unwrap();
        let imgs = random_images(2, 3);
        let l = pll_logits(&p, &imgs).unwrap();
        let swapped = Tensor::new(&[2, 1, 16, 16], [&imgs.data()[256..], &imgs.data()[..256]].concat()).unwrap();
        let l2 = pll_logits(&p, &swapped).unwrap();
        assert_eq!(l2.row(0), l.row(1));

        let ssfe = BackboneParams::init(Architecture::standard(6), 5);
        assert!(matches!(pll_logits(&ssfe, &imgs), Err(BackboneError::Phase { .. })));
    }

    #[test]
    fn finetune_copies_extractor_and_seeds_new_head() {
        let ssfe = BackboneParams::init(Architecture::standard(6), 5);
        let a = init_finetune(&ssfe, 11).unwrap();
        for name in &ssfe.names()[..8] {
            assert_eq!(a.get(name), ssfe.get(name));
        }
        assert_eq!(a.get("rot.w"), ssfe.get("rot.w"));
        assert_eq!(a, init_finetune(&ssfe, 11).unwrap());
        let b = init_finetune(&ssfe, 12).unwrap();
        assert_ne!(a.get("pll.w"), b.get("pll.w"));
        assert!(a.get("pll.w").unwrap().data().iter().all(|v| v.abs() <= 0.05));
        assert!(matches!(init_finetune(&a, 1), Err(BackboneError::Phase { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ssfe = BackboneParams::init(Architecture::standard(6), 5);
        let pll = init_finetune(&ssfe, 2).unwrap();
        for p in [&ssfe, &pll] {
            let path = dir.path().join("m.ckpt");
            save_checkpoint(p, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(&back, p);
            assert_eq!(back.checksum(), p.checksum());
        }
        let bytes = std::fs::read(dir.path().join("m.ckpt")).unwrap();
        std::fs::write(dir.path().join("t.ckpt"), &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&dir.path().join("t.ckpt")).is_err());
    }

    /// Scalar objective: sum of rotation logits times fixed weights plus a
    /// quadratic on h_ri. Exercises both seeds of `ForwardPass::backward`.
    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images = Tensor::new(&[2, 1, 4, 4], (0..32).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut params = BackboneParams::init(arch, 3);
        // nonzero biases keep relus away from exact kinks
        for name in ["conv1.b", "conv2.b", "rc.b", "ri.b"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = rng.gen_range(0.05..0.2);
            }
        }
        let wl: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &BackboneParams| {
            let pass = forward_ssfe(p, &images).unwrap();
            let lin: f64 = pass.logits.data().iter().zip(&wl).map(|(a, b)| a * b).sum();
            lin + pass.features.h_ri.data().iter().map(|v| 0.5 * v * v).sum::<f64>()
        };
        let pass = forward_ssfe(&params, &images).unwrap();
        let seed = Tensor::new(&[2, 4], wl.clone()).unwrap();
        let analytic = pass.backward(&seed, Some(&pass.features.h_ri.clone())).unwrap();
        let base = params.clone();
        let numeric = finite_difference(base.trainable(), 1e-5, |ts| {
            let mut p = base.clone();
            p.trainable_mut().clone_from_slice(ts);
            objective(&p)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.data().iter().zip(n.data()) {
                assert!((x - y).abs() / y.abs().max(1.0) < 1e-6, "{x} vs {y}");
            }
        }
        // and one optimizer step works on the trainable slice
        let mut opt = Adam::new(AdamConfig::default(), params.trainable()).unwrap();
        opt.step(params.trainable_mut(), &analytic).unwrap();
        assert!(params.is_finite());
    }
}
