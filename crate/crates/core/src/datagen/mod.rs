//! Synthetic benchmark construction.
//!
//! In-distribution data are noisy renderings of fixed per-class glyphs on a
//! 16x16 grayscale canvas; out-of-distribution data come from texture and
//! noise families that share no shape with any glyph. Candidate label sets
//! are formed by adding every incorrect label independently with the
//! partial rate `p`.
//!
//! The rotation pretext in [`crate::ssfe`] consumes [`rotate`]: exact
//! quarter turns by index permutation. The originals (rotation index 1) play
//! the role of positives and the rotated copies of weighted negatives, but
//! the pretext itself is an R-way classification over rotation indices.

mod container;
mod glyph;
mod ood;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use container::{load_dataset, read_header, save_dataset, DatasetHeader, FORMAT_VERSION, MAGIC};
pub use glyph::{GlyphSpec, ShapeFamily};
pub use ood::OodKind;

/// Side length of every generated image.
pub const IMAGE_SIDE: usize = 16;

/// Number of rotations used by the pretext task.
pub const ROTATIONS: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least one instance per class: n = {n}, q = {classes}")]
    TooFewInstances { n: usize, classes: usize },
    #[error("invalid glyph spec: {0}")]
    InvalidSpec(String),
    #[error("partial rate must lie in [0, 1], got {0}")]
    PartialRate(f64),
    #[error("rotation index {index} outside 1..={max}")]
    RotationIndex { index: usize, max: usize },
    #[error("image is not square: shape {0:?}")]
    NonSquare(Vec<usize>),
    #[error("unknown OOD kind `{0}`")]
    UnknownOodKind(String),
    #[error("need at least one OOD instance")]
    EmptyOod,
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated or oversized: expected {expected} bytes of {section}, found {actual}")]
    Truncated {
        section: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a set of instances comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    IdTrain,
    IdTest,
    Ood,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::IdTrain => "id-train",
            Origin::IdTest => "id-test",
            Origin::Ood => "ood",
        }
    }

    pub fn is_id(self) -> bool {
        !matches!(self, Origin::Ood)
    }
}

/// A set of labels over `0..q`, stored LSB-first in `ceil(q / 8)` bytes.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct LabelSet {
    classes: usize,
    bytes: Vec<u8>,
}

impl LabelSet {
    pub fn empty(classes: usize) -> Self {
        Self {
            classes,
            bytes: vec![0; Self::byte_len(classes)],
        }
    }

    pub fn singleton(classes: usize, label: usize) -> Self {
        let mut s = Self::empty(classes);
        s.insert(label);
        s
    }

    pub fn full(classes: usize) -> Self {
        let mut s = Self::empty(classes);
        (0..classes).for_each(|j| s.insert(j));
        s
    }

    pub fn byte_len(classes: usize) -> usize {
        classes.div_ceil(8)
    }

    pub(crate) fn from_bytes(classes: usize, bytes: &[u8]) -> Self {
        let mut s = Self {
            classes,
            bytes: bytes.to_vec(),
        };
        // bits past `classes` are not part of the set
        if classes % 8 != 0 {
            if let Some(last) = s.bytes.last_mut() {
                *last &= (1u8 << (classes % 8)) - 1;
            }
        }
        s
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn insert(&mut self, label: usize) {
        assert!(label < self.classes, "label {label} outside 0..{}", self.classes);
        self.bytes[label / 8] |= 1 << (label % 8);
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.classes && self.bytes[label / 8] & (1 << (label % 8)) != 0
    }

    pub fn len(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.iter().all(|&b| b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes).filter(|&j| self.contains(j))
    }
}

impl std::fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Images with hidden ground truth and (for ID data) candidate label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub side: usize,
    pub classes: usize,
    /// `n * side * side` pixels in `[0, 1]`, instance-major.
    pub pixels: Vec<f64>,
    /// `None` for OOD instances.
    pub true_labels: Vec<Option<usize>>,
    pub candidates: Vec<LabelSet>,
    pub origin: Origin,
    pub seed: u64,
    pub partial_rate: f64,
    pub ood_kind: Option<OodKind>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let area = self.side * self.side;
        &self.pixels[i * area..(i + 1) * area]
    }

    /// Stacks the chosen images into a `[B, 1, side, side]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let area = self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * area);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), 1, self.side, self.side], data).expect("batch shape")
    }

    pub fn all_images(&self) -> Tensor {
        Tensor::new(&[self.len(), 1, self.side, self.side], self.pixels.clone())
            .expect("image shape")
    }

    /// Labels of ID instances. Panics on OOD sets.
    pub fn labels(&self) -> Vec<usize> {
        self.true_labels
            .iter()
            .map(|l| l.expect("OOD instances carry no label"))
            .collect()
    }

    /// Replaces candidate sets by `{true label} + independent flips at rate p`.
    pub fn with_partial_labels(mut self, partial_rate: f64, seed: u64) -> Result<Self, DataError> {
        let labels = self.labels();
        self.candidates = assign_candidate_labels(&labels, self.classes, partial_rate, seed)?;
        self.partial_rate = partial_rate;
        Ok(self)
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

/// Counter-based generator: independent stream per `(seed, domain, index)`.
pub(crate) fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const DOMAIN_NOISE: u64 = 1;
const DOMAIN_ORDER: u64 = 2;
const DOMAIN_CANDIDATES: u64 = 3;
pub(crate) const DOMAIN_OOD: u64 = 4;

/// Balanced noisy glyph renderings. All instances start with singleton
/// candidate sets and origin `IdTrain`.
pub fn generate_id_dataset(spec: &GlyphSpec, n: usize, seed: u64) -> Result<LabeledImageSet, DataError> {
    spec.validate()?;
    let classes = spec.classes();
    if n < classes {
        return Err(DataError::TooFewInstances { n, classes });
    }
    let templates: Vec<Vec<f64>> = spec
        .families
        .iter()
        .map(|f| f.render(IMAGE_SIDE))
        .collect();

    // i mod q gives per-class counts within one of each other; a seeded
    // permutation spreads them over the set
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = stream_rng(seed, DOMAIN_ORDER, 0);
        labels.shuffle(&mut rng);
    }

    let area = IMAGE_SIDE * IMAGE_SIDE;
    let mut pixels = Vec::with_capacity(n * area);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("noise sigma"));
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = stream_rng(seed, DOMAIN_NOISE, i as u64);
        for &v in &templates[label] {
            let jitter = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            pixels.push((v + jitter).clamp(0.0, 1.0));
        }
    }
    Ok(LabeledImageSet {
        side: IMAGE_SIDE,
        classes,
        pixels,
        candidates: labels.iter().map(|&l| LabelSet::singleton(classes, l)).collect(),
        true_labels: labels.into_iter().map(Some).collect(),
        origin: Origin::IdTrain,
        seed,
        partial_rate: 0.0,
        ood_kind: None,
    })
}

/// Out-of-distribution images of one family. `classes` sizes the (empty)
/// candidate bitsets so the set can be scored next to ID data.
pub fn generate_ood_dataset(
    kind: OodKind,
    n: usize,
    classes: usize,
    seed: u64,
) -> Result<LabeledImageSet, DataError> {
    if n == 0 {
        return Err(DataError::EmptyOod);
    }
    let mut pixels = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    for i in 0..n {
        let mut rng = stream_rng(seed, DOMAIN_OOD + kind.index() as u64, i as u64);
        pixels.extend(kind.render(IMAGE_SIDE, &mut rng));
    }
    Ok(LabeledImageSet {
        side: IMAGE_SIDE,
        classes,
        pixels,
        true_labels: vec![None; n],
        candidates: vec![LabelSet::empty(classes); n],
        origin: Origin::Ood,
        seed,
        partial_rate: 0.0,
        ood_kind: Some(kind),
    })
}

/// Parses an OOD family name, e.g. `"uniform-noise"`.
pub fn parse_ood_kind(name: &str) -> Result<OodKind, DataError> {
    name.parse()
}

/// `{true label}` plus every other label independently with probability `p`.
pub fn assign_candidate_labels(
    true_labels: &[usize],
    classes: usize,
    partial_rate: f64,
    seed: u64,
) -> Result<Vec<LabelSet>, DataError> {
    if !(0.0..=1.0).contains(&partial_rate) {
        return Err(DataError::PartialRate(partial_rate));
    }
    let unit = Uniform::new(0.0, 1.0);
    true_labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            if label >= classes {
                return Err(DataError::Label { label, classes });
            }
            let mut rng = stream_rng(seed, DOMAIN_CANDIDATES, i as u64);
            let mut set = LabelSet::singleton(classes, label);
            for j in (0..classes).filter(|&j| j != label) {
                if unit.sample(&mut rng) < partial_rate {
                    set.insert(j);
                }
            }
            Ok(set)
        })
        .collect()
}

/// Quarter-turn rotation of the trailing two (square) axes. `r = 1` is the
/// identity; `r = k` turns counterclockwise by `90 * (k - 1)` degrees.
pub fn rotate(image: &Tensor, r: usize) -> Result<Tensor, DataError> {
    let shape = image.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(DataError::NonSquare(shape.to_vec()));
    }
    if !(1..=ROTATIONS).contains(&r) {
        return Err(DataError::RotationIndex {
            index: r,
            max: ROTATIONS,
        });
    }
    let side = shape[shape.len() - 1];
    let area = side * side;
    let mut out = vec![0.0; image.len()];
    if area > 0 {
        for (src, dst) in image.data().chunks(area).zip(out.chunks_mut(area)) {
            rotate_square(src, side, r - 1, dst);
        }
    }
    Ok(Tensor::new(shape, out)?)
}

/// Counterclockwise quarter turns of a row-major square image.
pub(crate) fn rotate_square(src: &[f64], side: usize, quarter_turns: usize, dst: &mut [f64]) {
    let last = side.saturating_sub(1);
    for i in 0..side {
        for j in 0..side {
            let (si, sj) = match quarter_turns % 4 {
                0 => (i, j),
                1 => (j, last - i),
                2 => (last - i, last - j),
                _ => (last - j, i),
            };
            dst[i * side + j] = src[si * side + sj];
        }
    }
}
