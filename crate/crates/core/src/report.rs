//! Report schema and its JSON, CSV and plot-data renderings.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::datagen::OodKind;
use crate::scoring::{GlcVector, ScoreKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Keys left out of the canonical hash because they vary between
/// otherwise identical runs.
const UNHASHED_KEYS: [&str; 3] = ["wall_ms", "artifacts", "out_dir"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0}")]
    Schema(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportMode {
    Experiment,
    ScoreAblation,
    SsfeAblation,
}

/// Whether the model was fine-tuned from a pretext-trained extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    WithSsfe,
    WithoutSsfe,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::WithSsfe => "with-ssfe",
            Arm::WithoutSsfe => "without-ssfe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub ood_kind: OodKind,
    pub aupr_in: f64,
    pub fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: ScoreKind,
    pub model_checksum: String,
    /// Mean over OOD kinds.
    pub aupr_in: f64,
    /// Mean over OOD kinds.
    pub fpr95: f64,
    pub per_ood: Vec<OodMetrics>,
}

impl KindResult {
    pub fn ood(&self, kind: OodKind) -> Option<&OodMetrics> {
        self.per_ood.iter().find(|m| m.ood_kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub arm: Arm,
    pub model_checksum: String,
    pub id_accuracy: f64,
    pub glc: GlcVector,
    pub final_ssfe_loss: Option<f64>,
    pub mean_max_confidence: f64,
    pub scores: Vec<KindResult>,
    pub wall_ms: u64,
}

impl SeedResult {
    pub fn kind(&self, kind: ScoreKind) -> Option<&KindResult> {
        self.scores.iter().find(|k| k.kind == kind)
    }
}

/// Seed mean and population standard deviation. `ood_kind` is `None` for
/// the average over OOD kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: Arm,
    pub kind: ScoreKind,
    pub ood_kind: Option<OodKind>,
    pub aupr_in_mean: f64,
    pub aupr_in_std: f64,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub seed: u64,
    pub kind: ScoreKind,
    pub ood_kind: OodKind,
    pub with_ssfe_aupr_in: f64,
    pub without_ssfe_aupr_in: f64,
    pub delta_aupr_in: f64,
    pub with_ssfe_fpr95: f64,
    pub without_ssfe_fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDelta {
    pub kind: ScoreKind,
    pub ood_kind: Option<OodKind>,
    pub delta_aupr_in: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub pairs: Vec<AblationPair>,
    /// Seed-averaged `with - without`, per OOD kind and overall.
    pub mean_delta_aupr_in: Vec<MeanDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub seed: u64,
    pub arm: Arm,
    pub kind: ScoreKind,
    /// `id-test` or an OOD kind name.
    pub population: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Fixed-width bins over `[lo, hi]`; the last bin is closed on the right.
pub fn histogram_counts(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0; bins];
    for &v in values {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        let b = if t.is_nan() || t < 0.0 { 0 } else { (t as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}

/// Bin edges spanning every value in `groups`, padded when they coincide.
pub fn histogram_edges<'a>(groups: impl IntoIterator<Item = &'a [f64]>, bins: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for g in groups {
        for &v in g {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi = lo + 1.0;
    }
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub mode: ReportMode,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<SummaryRow>,
    pub id_accuracy_mean: f64,
    pub id_accuracy_std: f64,
    pub ablation: Option<AblationSummary>,
    pub histograms: Vec<Histogram>,
    pub artifacts: Vec<PathBuf>,
    pub wall_ms: u64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ScoreReport {
    pub fn new(mode: ReportMode, config: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            config,
            seeds: Vec::new(),
            summary: Vec::new(),
            id_accuracy_mean: 0.0,
            id_accuracy_std: 0.0,
            ablation: None,
            histograms: Vec::new(),
            artifacts: Vec::new(),
            wall_ms: 0,
        }
    }

    /// Fills the summary, accuracy statistics and ablation pairs from the
    /// per-seed results.
    pub fn summarize(&mut self) {
        let accs: Vec<f64> = self
            .seeds
            .iter()
            .filter(|s| s.arm == Arm::WithSsfe)
            .map(|s| s.id_accuracy)
            .collect();
        (self.id_accuracy_mean, self.id_accuracy_std) = if accs.is_empty() { (0.0, 0.0) } else { mean_std(&accs) };

        self.summary.clear();
        let mut arms: Vec<Arm> = self.seeds.iter().map(|s| s.arm).collect();
        arms.sort();
        arms.dedup();
        let oods: Vec<Option<OodKind>> = std::iter::once(None)
            .chain(self.config.data.ood_kinds.iter().copied().map(Some))
            .collect();
        for &arm in &arms {
            let kinds: Vec<ScoreKind> = self
                .seeds
                .iter()
                .find(|s| s.arm == arm)
                .map(|s| s.scores.iter().map(|k| k.kind).collect())
                .unwrap_or_default();
            for kind in kinds {
                for &ood in &oods {
                    let picked: Vec<(f64, f64)> = self
                        .seeds
                        .iter()
                        .filter(|s| s.arm == arm)
                        .filter_map(|s| s.kind(kind))
                        .filter_map(|k| match ood {
                            None => Some((k.aupr_in, k.fpr95)),
                            Some(o) => k.ood(o).map(|m| (m.aupr_in, m.fpr95)),
                        })
                        .collect();
                    if picked.is_empty() {
                        continue;
                    }
                    let (am, asd) = mean_std(&picked.iter().map(|p| p.0).collect::<Vec<_>>());
                    let (fm, fsd) = mean_std(&picked.iter().map(|p| p.1).collect::<Vec<_>>());
                    self.summary.push(SummaryRow {
                        arm,
                        kind,
                        ood_kind: ood,
                        aupr_in_mean: am,
                        aupr_in_std: asd,
                        fpr95_mean: fm,
                        fpr95_std: fsd,
                    });
                }
            }
        }

        if self.mode == ReportMode::SsfeAblation {
            self.ablation = Some(self.pair_arms());
        }
    }

    fn pair_arms(&self) -> AblationSummary {
        let mut pairs = Vec::new();
        for with in self.seeds.iter().filter(|s| s.arm == Arm::WithSsfe) {
            let Some(without) = self.seeds.iter().find(|s| s.arm == Arm::WithoutSsfe && s.seed == with.seed) else {
                continue;
            };
            for k in &with.scores {
                let Some(other) = without.kind(k.kind) else { continue };
                for m in &k.per_ood {
                    let Some(o) = other.ood(m.ood_kind) else { continue };
                    pairs.push(AblationPair {
                        seed: with.seed,
                        kind: k.kind,
                        ood_kind: m.ood_kind,
                        with_ssfe_aupr_in: m.aupr_in,
                        without_ssfe_aupr_in: o.aupr_in,
                        delta_aupr_in: m.aupr_in - o.aupr_in,
                        with_ssfe_fpr95: m.fpr95,
                        without_ssfe_fpr95: o.fpr95,
                    });
                }
            }
        }
        let mut kinds: Vec<ScoreKind> = pairs.iter().map(|p| p.kind).collect();
        kinds.sort();
        kinds.dedup();
        let mut mean_delta = Vec::new();
        for kind in kinds {
            let of_kind: Vec<&AblationPair> = pairs.iter().filter(|p| p.kind == kind).collect();
            let mean = |ps: &[&AblationPair]| ps.iter().map(|p| p.delta_aupr_in).sum::<f64>() / ps.len() as f64;
            mean_delta.push(MeanDelta {
                kind,
                ood_kind: None,
                delta_aupr_in: mean(&of_kind),
            });
            for &ood in &self.config.data.ood_kinds {
                let sub: Vec<&AblationPair> = of_kind.iter().copied().filter(|p| p.ood_kind == ood).collect();
                if !sub.is_empty() {
                    mean_delta.push(MeanDelta {
                        kind,
                        ood_kind: Some(ood),
                        delta_aupr_in: mean(&sub),
                    });
                }
            }
        }
        AblationSummary {
            pairs,
            mean_delta_aupr_in: mean_delta,
        }
    }

    pub fn summary_row(&self, arm: Arm, kind: ScoreKind, ood: Option<OodKind>) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.arm == arm && r.kind == kind && r.ood_kind == ood)
    }

    /// Pretty JSON with object keys in sorted order.
    pub fn to_json(&self) -> Result<String, ReportError> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(ReportError::Schema(report.schema_version));
        }
        Ok(report)
    }

    /// SHA-256 of the canonical JSON without wall-clock times and paths.
    pub fn canonical_hash(&self) -> Result<String, ReportError> {
        fn strip(v: &mut Value) {
            match v {
                Value::Object(map) => {
                    for key in UNHASHED_KEYS {
                        map.remove(key);
                    }
                    map.values_mut().for_each(strip);
                }
                Value::Array(items) => items.iter_mut().for_each(strip),
                _ => {}
            }
        }
        let mut value = serde_json::to_value(self)?;
        strip(&mut value);
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }

    /// `(seed, arm, kind, metric, value)` with the OOD-averaged detection
    /// metrics and the model's ID accuracy.
    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "arm", "kind", "metric", "value"])?;
        for s in &self.seeds {
            for k in &s.scores {
                for (metric, value) in [("aupr_in", k.aupr_in), ("fpr95", k.fpr95), ("id_accuracy", s.id_accuracy)] {
                    w.write_record([
                        s.seed.to_string(),
                        s.arm.to_string(),
                        k.kind.to_string(),
                        metric.to_string(),
                        value.to_string(),
                    ])?;
                }
            }
        }
        finish_csv(w)
    }

    /// `(seed, arm, kind, ood_kind, metric, value)`.
    pub fn per_ood_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "arm", "kind", "ood_kind", "metric", "value"])?;
        for s in &self.seeds {
            for k in &s.scores {
                for m in &k.per_ood {
                    for (metric, value) in [("aupr_in", m.aupr_in), ("fpr95", m.fpr95)] {
                        w.write_record([
                            s.seed.to_string(),
                            s.arm.to_string(),
                            k.kind.to_string(),
                            m.ood_kind.to_string(),
                            metric.to_string(),
                            value.to_string(),
                        ])?;
                    }
                }
            }
        }
        finish_csv(w)
    }

    /// One row per histogram bin.
    pub fn plotdata_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "arm", "kind", "population", "bin", "lower", "upper", "count"])?;
        for h in &self.histograms {
            for (b, count) in h.counts.iter().enumerate() {
                w.write_record([
                    h.seed.to_string(),
                    h.arm.to_string(),
                    h.kind.to_string(),
                    h.population.clone(),
                    b.to_string(),
                    h.edges[b].to_string(),
                    h.edges[b + 1].to_string(),
                    count.to_string(),
                ])?;
            }
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    PlotData,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::PlotData];
}

/// Writes the requested renderings into `dir` and returns their paths.
pub fn emit_report(report: &ScoreReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let mut files: Vec<(&str, String)> = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => files.push(("report.json", report.to_json()?)),
            ReportFormat::Csv => {
                files.push(("report.csv", report.to_csv()?));
                files.push(("report_per_ood.csv", report.per_ood_csv()?));
            }
            ReportFormat::PlotData => files.push(("plotdata.csv", report.plotdata_csv()?)),
        }
    }
    for (name, text) in files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, text) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(io(&path)(e));
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_cover_every_value() {
        let a = [0.0, 0.5, 1.0, 1.0, 0.25];
        let b = [2.0, -1.0];
        let edges = histogram_edges([&a[..], &b[..]], 4);
        assert_eq!(edges, vec![-1.0, -0.25, 0.5, 1.25, 2.0]);
        assert_eq!(histogram_counts(&a, &edges), vec![0, 2, 3, 0]);
        assert_eq!(histogram_counts(&b, &edges), vec![1, 0, 0, 1]);
        let flat = histogram_edges([&[3.0, 3.0][..]], 2);
        assert_eq!(histogram_counts(&[3.0, 3.0], &flat).iter().sum::<usize>(), 2);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }
}
