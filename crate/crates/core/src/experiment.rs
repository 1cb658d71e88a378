//! End-to-end pipeline: data, pretext training, partial-label fine-tuning,
//! scoring and evaluation, once per seed.

use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, Architecture, BackboneParams};
use crate::config::{ExperimentConfig, ScoreConfig};
use crate::datagen::{
    self, generate_id_dataset, generate_ood_dataset, DataError, LabeledImageSet, OodKind, Origin,
};
use crate::metrics::{aupr_in, fpr95, id_accuracy, EvalInput, MetricError};
use crate::pll::{self, ConfidenceMatrix, PllLog};
use crate::report::{
    histogram_counts, histogram_edges, Arm, Histogram, KindResult, OodMetrics, ReportMode, ScoreReport, SeedResult,
};
use crate::scoring::{
    aggregate_label_confidence, baseline_score, pe_from_logits, write_scores, GlcVector, ScoreError, ScoreKind,
    ScoreRow, ScoreVector,
};
use crate::ssfe::{self, SsfeLog};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    GenerateData,
    TrainSsfe,
    FinetunePll,
    Score,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::GenerateData => "generate-data",
            Stage::TrainSsfe => "train-ssfe",
            Stage::FinetunePll => "finetune-pll",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {source}")]
pub struct ExperimentError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn StdError + Send + Sync>,
}

impl ExperimentError {
    pub fn new(stage: Stage, source: impl Into<Box<dyn StdError + Send + Sync>>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}

/// Tags an error with the stage it came from.
pub fn at<E: StdError + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::new(stage, e)
}

/// Independent sub-seed for one purpose of one run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TRAIN: u64 = 1;
const TAG_TEST: u64 = 2;
const TAG_CANDIDATES: u64 = 3;
const TAG_OOD: u64 = 16;
const EVAL_CHUNK: usize = 256;
pub const MODEL_SUMMARY_FILE: &str = "model.json";

pub struct Datasets {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub ood: Vec<LabeledImageSet>,
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self, DataError> {
        let spec = datagen::GlyphSpec::standard(cfg.data.classes, cfg.data.pixel_noise)?;
        let train = generate_id_dataset(&spec, cfg.data.n_train, derive_seed(seed, TAG_TRAIN))?
            .with_partial_labels(cfg.data.partial_rate, derive_seed(seed, TAG_CANDIDATES))?;
        let test = generate_id_dataset(&spec, cfg.data.n_test, derive_seed(seed, TAG_TEST))?.with_origin(Origin::IdTest);
        let ood = cfg
            .data
            .ood_kinds
            .iter()
            .map(|&k| {
                generate_ood_dataset(
                    k,
                    cfg.data.n_ood,
                    cfg.data.classes,
                    derive_seed(seed, TAG_OOD + k as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { train, test, ood })
    }

    pub fn file_names(kinds: &[OodKind]) -> Vec<String> {
        let mut names = vec!["train.plod".to_string(), "test.plod".to_string()];
        names.extend(kinds.iter().map(|k| format!("ood-{k}.plod")));
        names
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
        fs::create_dir_all(dir)?;
        let kinds: Vec<OodKind> = self.ood.iter().filter_map(|s| s.ood_kind).collect();
        let sets = [&self.train, &self.test].into_iter().chain(&self.ood);
        let mut paths = Vec::new();
        for (name, set) in Self::file_names(&kinds).into_iter().zip(sets) {
            let path = dir.join(name);
            datagen::save_dataset(set, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub fn load(dir: &Path, kinds: &[OodKind]) -> Result<Self, DataError> {
        let names = Self::file_names(kinds);
        let mut sets = names
            .iter()
            .map(|n| datagen::load_dataset(&dir.join(n)))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter();
        let train = sets.next().expect("train file");
        let test = sets.next().expect("test file");
        Ok(Self {
            train,
            test,
            ood: sets.collect(),
        })
    }
}

pub struct TrainedModel {
    pub arm: Arm,
    pub ssfe: BackboneParams,
    pub pll: BackboneParams,
    pub confidence: ConfidenceMatrix,
    pub ssfe_log: Option<SsfeLog>,
    pub pll_log: PllLog,
}

/// Pretext training, or a freshly initialised extractor for
/// [`Arm::WithoutSsfe`].
pub fn pretrain(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &LabeledImageSet,
    arm: Arm,
) -> Result<(BackboneParams, Option<SsfeLog>), ExperimentError> {
    match arm {
        Arm::WithSsfe => {
            let scfg = ssfe::SsfeConfig { seed, ..cfg.ssfe.clone() };
            let (p, log) = ssfe::train_ssfe(train, &scfg).map_err(at(Stage::TrainSsfe))?;
            Ok((p, Some(log)))
        }
        Arm::WithoutSsfe => {
            let arch = Architecture {
                side: train.side,
                rotations: cfg.ssfe.rotations,
                ..Architecture::standard(train.classes)
            };
            Ok((BackboneParams::init(arch, seed), None))
        }
    }
}

pub fn finetune(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &LabeledImageSet,
    start: &BackboneParams,
) -> Result<(BackboneParams, ConfidenceMatrix, PllLog), ExperimentError> {
    let pcfg = pll::PllConfig { seed, ..cfg.pll.clone() };
    pll::finetune_pll(train, start, &pcfg).map_err(at(Stage::FinetunePll))
}

pub fn train_model(cfg: &ExperimentConfig, seed: u64, train: &LabeledImageSet, arm: Arm) -> Result<TrainedModel, ExperimentError> {
    let (ssfe_params, ssfe_log) = pretrain(cfg, seed, train, arm)?;
    let (pll_params, confidence, pll_log) = finetune(cfg, seed, train, &ssfe_params)?;
    Ok(TrainedModel {
        arm,
        ssfe: ssfe_params,
        pll: pll_params,
        confidence,
        ssfe_log,
        pll_log,
    })
}

pub fn logits_for(params: &BackboneParams, set: &LabeledImageSet) -> Result<Tensor, ExperimentError> {
    backbone::pll_logits_batched(params, &set.all_images(), EVAL_CHUNK).map_err(at(Stage::Score))
}

pub fn score_logits(score: &ScoreConfig, kind: ScoreKind, logits: &Tensor, glc: &GlcVector) -> Result<ScoreVector, ScoreError> {
    match kind {
        ScoreKind::PartialEnergy => pe_from_logits(logits, glc, score.energy_input),
        ScoreKind::Energy => baseline_score(logits, kind, score.energy_temperature),
        ScoreKind::Odin => baseline_score(logits, kind, score.odin_temperature),
        _ => baseline_score(logits, kind, 1.0),
    }
}

/// Scores of one kind on the ID test set and on every OOD set.
#[derive(Debug, Clone, PartialEq)]
pub struct KindScores {
    pub kind: ScoreKind,
    pub id: Vec<f64>,
    pub ood: Vec<(OodKind, Vec<f64>)>,
}

pub struct Scored {
    pub glc: GlcVector,
    pub id_accuracy: f64,
    pub kinds: Vec<KindScores>,
}

pub fn score_model(
    cfg: &ExperimentConfig,
    params: &BackboneParams,
    confidence: &ConfidenceMatrix,
    data: &Datasets,
    kinds: &[ScoreKind],
) -> Result<Scored, ExperimentError> {
    let glc = aggregate_label_confidence(confidence, cfg.score.glc_mode).map_err(at(Stage::Score))?;
    let id_logits = logits_for(params, &data.test)?;
    let ood_logits: Vec<(OodKind, Tensor)> = data
        .ood
        .iter()
        .map(|s| Ok((s.ood_kind.expect("OOD set has a kind"), logits_for(params, s)?)))
        .collect::<Result<_, ExperimentError>>()?;
    let labels = data.test.labels();
    let accuracy = id_accuracy(&id_logits, &labels).map_err(at(Stage::Evaluate))?;
    let mut out = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let id = score_logits(&cfg.score, kind, &id_logits, &glc).map_err(at(Stage::Score))?.scores;
        let ood = ood_logits
            .iter()
            .map(|(k, l)| Ok((*k, score_logits(&cfg.score, kind, l, &glc)?.scores)))
            .collect::<Result<_, ScoreError>>()
            .map_err(at(Stage::Score))?;
        out.push(KindScores { kind, id, ood });
    }
    Ok(Scored {
        glc,
        id_accuracy: accuracy,
        kinds: out,
    })
}

pub fn evaluate_kind(scores: &KindScores, checksum: &str) -> Result<KindResult, MetricError> {
    let mut per_ood = Vec::with_capacity(scores.ood.len());
    for (ood_kind, ood) in &scores.ood {
        let input = EvalInput::new(scores.id.clone(), ood.clone());
        per_ood.push(OodMetrics {
            ood_kind: *ood_kind,
            aupr_in: aupr_in(&input)?,
            fpr95: fpr95(&input)?,
        });
    }
    let n = per_ood.len().max(1) as f64;
    Ok(KindResult {
        kind: scores.kind,
        model_checksum: checksum.to_string(),
        aupr_in: per_ood.iter().map(|m| m.aupr_in).sum::<f64>() / n,
        fpr95: per_ood.iter().map(|m| m.fpr95).sum::<f64>() / n,
        per_ood,
    })
}

pub fn histograms(seed: u64, arm: Arm, scores: &KindScores, bins: usize) -> Vec<Histogram> {
    let groups = std::iter::once(scores.id.as_slice()).chain(scores.ood.iter().map(|(_, s)| s.as_slice()));
    let edges = histogram_edges(groups, bins);
    let mut out = vec![Histogram {
        seed,
        arm,
        kind: scores.kind,
        population: Origin::IdTest.as_str().to_string(),
        counts: histogram_counts(&scores.id, &edges),
        edges: edges.clone(),
    }];
    for (k, s) in &scores.ood {
        out.push(Histogram {
            seed,
            arm,
            kind: scores.kind,
            population: k.to_string(),
            counts: histogram_counts(s, &edges),
            edges: edges.clone(),
        });
    }
    out
}

/// Score dumps, one file per OOD kind holding the ID rows and that kind's
/// OOD rows.
pub fn score_dumps(scored: &[KindScores]) -> Vec<(OodKind, Vec<ScoreRow>)> {
    let Some(first) = scored.first() else { return Vec::new() };
    first
        .ood
        .iter()
        .enumerate()
        .map(|(o, (ood_kind, _))| {
            let mut rows = Vec::new();
            for ks in scored {
                rows.extend(ks.id.iter().enumerate().map(|(i, &score)| ScoreRow {
                    instance_id: i,
                    origin: Origin::IdTest,
                    kind: ks.kind,
                    score,
                }));
                rows.extend(ks.ood[o].1.iter().enumerate().map(|(i, &score)| ScoreRow {
                    instance_id: i,
                    origin: Origin::Ood,
                    kind: ks.kind,
                    score,
                }));
            }
            (*ood_kind, rows)
        })
        .collect()
}

/// Inverse of [`score_dumps`].
pub fn kind_scores_from_dumps(dumps: &[(OodKind, Vec<ScoreRow>)]) -> Result<Vec<KindScores>, ExperimentError> {
    let Some((_, first)) = dumps.first() else { return Ok(Vec::new()) };
    let mut kinds: Vec<ScoreKind> = Vec::new();
    for r in first {
        if !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
    }
    let pick = |rows: &[ScoreRow], kind: ScoreKind, origin: Origin| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.kind == kind && r.origin == origin)
            .map(|r| r.score)
            .collect()
    };
    kinds
        .into_iter()
        .map(|kind| {
            let id = pick(first, kind, Origin::IdTest);
            let mut ood = Vec::with_capacity(dumps.len());
            for (ood_kind, rows) in dumps {
                if pick(rows, kind, Origin::IdTest) != id {
                    return Err(ExperimentError::new(
                        Stage::Evaluate,
                        format!("ID scores for {kind} differ between dumps"),
                    ));
                }
                ood.push((*ood_kind, pick(rows, kind, Origin::Ood)));
            }
            Ok(KindScores { kind, id, ood })
        })
        .collect()
}

pub fn data_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}")).join("data")
}

pub fn model_dir(root: &Path, seed: u64, arm: Arm) -> PathBuf {
    root.join(format!("seed-{seed}")).join(arm.to_string())
}

/// Files written so far by a run, removed again if the run fails.
struct Artifacts {
    enabled: bool,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Artifacts {
    fn dir(&mut self, path: PathBuf) -> Result<PathBuf, ExperimentError> {
        if !path.exists() {
            fs::create_dir_all(&path).map_err(at(Stage::Report))?;
            self.dirs.push(path.clone());
        }
        Ok(path)
    }

    fn write(&mut self, path: PathBuf, text: &str) -> Result<(), ExperimentError> {
        fs::write(&path, text).map_err(at(Stage::Report))?;
        self.files.push(path);
        Ok(())
    }

    fn discard(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }

    fn save_seed(
        &mut self,
        root: &Path,
        model: &TrainedModel,
        scored: &Scored,
        summary: &ModelSummary,
    ) -> Result<(), ExperimentError> {
        if !self.enabled {
            return Ok(());
        }
        let dir = self.dir(model_dir(root, summary.seed, model.arm))?;
        if let Some(log) = &model.ssfe_log {
            let path = dir.join("ssfe.plck");
            backbone::save_checkpoint(&model.ssfe, &path).map_err(at(Stage::TrainSsfe))?;
            self.files.push(path);
            self.write(dir.join("ssfe_log.csv"), &log.to_csv())?;
        }
        let path = dir.join("pll.plck");
        backbone::save_checkpoint(&model.pll, &path).map_err(at(Stage::FinetunePll))?;
        self.files.push(path);
        let path = dir.join("confidence.plcm");
        pll::save_confidence(&model.confidence, &path).map_err(at(Stage::FinetunePll))?;
        self.files.push(path);
        self.write(dir.join("pll_log.csv"), &model.pll_log.to_csv())?;
        for (kind, rows) in score_dumps(&scored.kinds) {
            let path = dir.join(format!("scores-{kind}.csv"));
            let file = fs::File::create(&path).map_err(at(Stage::Score))?;
            self.files.push(path);
            write_scores(file, &rows).map_err(at(Stage::Score))?;
        }
        let json = serde_json::to_string_pretty(summary).map_err(at(Stage::Score))?;
        self.write(dir.join(MODEL_SUMMARY_FILE), &json)
    }
}

/// What scoring established about one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub seed: u64,
    pub arm: Arm,
    pub model_checksum: String,
    pub id_accuracy: f64,
    pub glc: GlcVector,
    pub final_ssfe_loss: Option<f64>,
    pub mean_max_confidence: f64,
}

impl ModelSummary {
    pub fn new(seed: u64, model: &TrainedModel, scored: &Scored) -> Self {
        Self {
            seed,
            arm: model.arm,
            model_checksum: model.pll.checksum(),
            id_accuracy: scored.id_accuracy,
            glc: scored.glc.clone(),
            final_ssfe_loss: model.ssfe_log.as_ref().and_then(|l| l.epochs.last()).map(|e| e.l_ssfe),
            mean_max_confidence: model.confidence.mean_row_max(),
        }
    }
}

pub fn seed_result(
    summary: &ModelSummary,
    kinds: &[KindScores],
    bins: usize,
    wall_ms: u64,
) -> Result<(SeedResult, Vec<Histogram>), ExperimentError> {
    let scores = kinds
        .iter()
        .map(|k| evaluate_kind(k, &summary.model_checksum))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at(Stage::Evaluate))?;
    let hist = kinds
        .iter()
        .flat_map(|k| histograms(summary.seed, summary.arm, k, bins))
        .collect();
    let result = SeedResult {
        seed: summary.seed,
        arm: summary.arm,
        model_checksum: summary.model_checksum.clone(),
        id_accuracy: summary.id_accuracy,
        glc: summary.glc.clone(),
        final_ssfe_loss: summary.final_ssfe_loss,
        mean_max_confidence: summary.mean_max_confidence,
        scores,
        wall_ms,
    };
    Ok((result, hist))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Every score kind on one shared model per seed.
    Score,
    /// The same seeds fine-tuned with and without pretext training.
    Ssfe,
}

impl From<AblationMode> for ReportMode {
    fn from(mode: AblationMode) -> Self {
        match mode {
            AblationMode::Score => ReportMode::ScoreAblation,
            AblationMode::Ssfe => ReportMode::SsfeAblation,
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "score" => Ok(AblationMode::Score),
            "ssfe" => Ok(AblationMode::Ssfe),
            other => Err(format!("unknown ablation {other:?}, expected score or ssfe")),
        }
    }
}

/// Score kinds and arms a run of the given mode covers.
pub fn plan(cfg: &ExperimentConfig, mode: ReportMode) -> (Vec<ScoreKind>, Vec<Arm>) {
    match mode {
        ReportMode::Experiment => (cfg.score.kinds.clone(), vec![Arm::WithSsfe]),
        ReportMode::ScoreAblation => (ScoreKind::ALL.to_vec(), vec![Arm::WithSsfe]),
        ReportMode::SsfeAblation => {
            let mut k = cfg.score.kinds.clone();
            if !k.contains(&ScoreKind::PartialEnergy) {
                k.insert(0, ScoreKind::PartialEnergy);
            }
            (k, vec![Arm::WithSsfe, Arm::WithoutSsfe])
        }
    }
}

fn run(cfg: &ExperimentConfig, mode: ReportMode) -> Result<ScoreReport, ExperimentError> {
    cfg.validate().map_err(at(Stage::Config))?;
    let started = Instant::now();
    let (kinds, arms) = plan(cfg, mode);
    let mut report = ScoreReport::new(mode, cfg.clone());
    let mut artifacts = Artifacts {
        enabled: cfg.save_artifacts,
        files: Vec::new(),
        dirs: Vec::new(),
    };
    let outcome = (|| {
        for &seed in &cfg.seeds {
            let data = Datasets::generate(cfg, seed).map_err(at(Stage::GenerateData))?;
            for &arm in &arms {
                let seed_started = Instant::now();
                log::info!("seed {seed} ({arm}): training");
                let model = train_model(cfg, seed, &data.train, arm)?;
                let scored = score_model(cfg, &model.pll, &model.confidence, &data, &kinds)?;
                let summary = ModelSummary::new(seed, &model, &scored);
                artifacts.save_seed(&cfg.out_dir, &model, &scored, &summary)?;
                let wall_ms = seed_started.elapsed().as_millis() as u64;
                let (result, hist) = seed_result(&summary, &scored.kinds, cfg.score.histogram_bins, wall_ms)?;
                log::info!("seed {seed} ({arm}): ID accuracy {:.4}", result.id_accuracy);
                report.seeds.push(result);
                report.histograms.extend(hist);
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        artifacts.discard();
        return Err(e);
    }
    report.summarize();
    report.artifacts = artifacts.files;
    report.wall_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ScoreReport, ExperimentError> {
    run(cfg, ReportMode::Experiment)
}

pub fn run_ablation(cfg: &ExperimentConfig, mode: AblationMode) -> Result<ScoreReport, ExperimentError> {
    run(cfg, mode.into())
}
