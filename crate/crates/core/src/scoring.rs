//! Detection scores. Every score is oriented so that higher means more
//! in-distribution.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Origin;
use crate::pll::ConfidenceMatrix;
use crate::tensor::{log_sum_exp, softmax_rows, softplus, Tensor};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("need at least 2 rows to aggregate confidences, got {0}")]
    TooFewRows(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown score kind {0:?}")]
    UnknownKind(String),
    #[error("unknown aggregation mode {0:?}")]
    UnknownMode(String),
    #[error("{0} is not a baseline score")]
    NotBaseline(ScoreKind),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite {kind} score at row {row}")]
    NonFinite { kind: ScoreKind, row: usize },
    #[error("score file: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlcMode {
    /// `g_j = q * a_j`, nonnegative with mean one.
    RawMean,
    /// Column means standardized across labels.
    ZScore,
}

impl GlcMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GlcMode::RawMean => "raw-mean",
            GlcMode::ZScore => "z-score",
        }
    }
}

impl fmt::Display for GlcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GlcMode {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw-mean" => Ok(GlcMode::RawMean),
            "z-score" => Ok(GlcMode::ZScore),
            other => Err(ScoreError::UnknownMode(other.to_string())),
        }
    }
}

/// Per-label weights together with the column statistics they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlcVector {
    pub g: Vec<f64>,
    pub mode: GlcMode,
    /// Column means of the confidence matrix.
    pub means: Vec<f64>,
    /// Population standard deviation of each column. Reported, not used.
    pub stds: Vec<f64>,
}

/// Weights from column means alone.
pub fn glc_weights(means: &[f64], mode: GlcMode) -> Vec<f64> {
    let q = means.len();
    match mode {
        GlcMode::RawMean => means.iter().map(|a| q as f64 * a).collect(),
        GlcMode::ZScore => {
            let mu = means.iter().sum::<f64>() / q as f64;
            let var = means.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / q as f64;
            let sd = var.sqrt();
            if sd > 0.0 {
                means.iter().map(|a| (a - mu) / sd).collect()
            } else {
                vec![0.0; q]
            }
        }
    }
}

pub fn aggregate_label_confidence(c: &ConfidenceMatrix, mode: GlcMode) -> Result<GlcVector, ScoreError> {
    let n = c.len();
    if n < 2 {
        return Err(ScoreError::TooFewRows(n));
    }
    let q = c.classes();
    let mut means = vec![0.0; q];
    for row in c.rows() {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut stds = vec![0.0; q];
    for row in c.rows() {
        for ((s, v), m) in stds.iter_mut().zip(row).zip(&means) {
            *s += (v - m).powi(2);
        }
    }
    stds.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt());
    Ok(GlcVector {
        g: glc_weights(&means, mode),
        mode,
        means,
        stds,
    })
}

/// `E = -ln(1 + exp(x))` elementwise.
pub fn label_energy(values: &Tensor) -> Tensor {
    values.map(|x| -softplus(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    #[serde(rename = "pe")]
    PartialEnergy,
    Energy,
    JointEnergy,
    Entropy,
    Msp,
    Odin,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::PartialEnergy,
        ScoreKind::Energy,
        ScoreKind::JointEnergy,
        ScoreKind::Entropy,
        ScoreKind::Msp,
        ScoreKind::Odin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::PartialEnergy => "pe",
            ScoreKind::Energy => "energy",
            ScoreKind::JointEnergy => "joint-energy",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Msp => "msp",
            ScoreKind::Odin => "odin",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ScoreError::UnknownKind(s.to_string()))
    }
}

/// Per-instance scores, higher meaning more in-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    fn checked(kind: ScoreKind, scores: Vec<f64>) -> Result<Self, ScoreError> {
        if let Some(row) = scores.iter().position(|s| !s.is_finite()) {
            return Err(ScoreError::NonFinite { kind, row });
        }
        Ok(Self { kind, scores })
    }
}

/// Detection score `-sum_j g_j E_j` for each row of `energy`.
pub fn partial_energy(energy: &Tensor, g: &GlcVector) -> Result<ScoreVector, ScoreError> {
    let (_, q) = energy.dims2().map_err(|e| ScoreError::Shape(e.to_string()))?;
    if q != g.g.len() {
        return Err(ScoreError::Shape(format!("{q} energy columns for {} weights", g.g.len())));
    }
    let scores = energy
        .rows()
        .map(|row| -row.iter().zip(&g.g).map(|(e, w)| e * w).sum::<f64>())
        .collect();
    ScoreVector::checked(ScoreKind::PartialEnergy, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyInput {
    Probabilities,
    Logits,
}

/// Partial-Energy straight from classifier logits.
pub fn pe_from_logits(logits: &Tensor, g: &GlcVector, input: EnergyInput) -> Result<ScoreVector, ScoreError> {
    let values = match input {
        EnergyInput::Probabilities => softmax_rows(logits).map_err(|e| ScoreError::Shape(e.to_string()))?,
        EnergyInput::Logits => logits.clone(),
    };
    partial_energy(&label_energy(&values), g)
}

fn entropy_score(row: &[f64]) -> f64 {
    let lse = log_sum_exp(row);
    // -H = sum p log p with log p = t - lse
    row.iter()
        .map(|t| {
            let log_p = t - lse;
            let p = log_p.exp();
            if p > 0.0 {
                p * log_p
            } else {
                0.0
            }
        })
        .sum()
}

fn max_softmax(row: &[f64], temperature: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = row.iter().map(|t| t / temperature).collect();
    (max / temperature - log_sum_exp(&scaled)).exp()
}

pub fn baseline_score(logits: &Tensor, kind: ScoreKind, temperature: f64) -> Result<ScoreVector, ScoreError> {
    logits.dims2().map_err(|e| ScoreError::Shape(e.to_string()))?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ScoreError::Temperature(temperature));
    }
    let score: fn(&[f64], f64) -> f64 = match kind {
        ScoreKind::PartialEnergy => return Err(ScoreError::NotBaseline(kind)),
        ScoreKind::Energy => |r, t| {
            let scaled: Vec<f64> = r.iter().map(|v| v / t).collect();
            t * log_sum_exp(&scaled)
        },
        ScoreKind::JointEnergy => |r, _| r.iter().map(|&v| softplus(v)).sum(),
        ScoreKind::Entropy => |r, _| entropy_score(r),
        ScoreKind::Msp => |r, _| max_softmax(r, 1.0),
        ScoreKind::Odin => max_softmax,
    };
    ScoreVector::checked(kind, logits.rows().map(|r| score(r, temperature)).collect())
}

/// One line of a score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instance_id: usize,
    pub origin: Origin,
    pub kind: ScoreKind,
    pub score: f64,
}

pub fn write_scores<W: Write>(out: W, rows: &[ScoreRow]) -> Result<(), ScoreError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_scores<R: Read>(input: R) -> Result<Vec<ScoreRow>, ScoreError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?;
    Ok(rows)
}
