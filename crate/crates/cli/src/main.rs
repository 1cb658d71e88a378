//! `plood`: runs the whole pipeline, an ablation, or any single stage
//! against the files left behind by the previous one.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plood_core::backbone::{load_checkpoint, save_checkpoint};
use plood_core::config::ExperimentConfig;
use plood_core::datagen::load_dataset;
use plood_core::experiment::{
    at, data_dir, finetune, kind_scores_from_dumps, model_dir, plan, pretrain, run_ablation, run_experiment,
    score_dumps, score_model, seed_result, AblationMode, Datasets, ExperimentError, ModelSummary, Stage,
    MODEL_SUMMARY_FILE,
};
use plood_core::pll::{load_confidence, save_confidence};
use plood_core::report::{emit_report, Arm, ReportFormat, ReportMode, ScoreReport};
use plood_core::scoring::{read_scores, write_scores, GlcMode, ScoreKind};
use plood_core::ssfe::SsfeLog;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "plood", version, about = "Out-of-distribution detection under partial labels on synthetic glyphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file; unset keys keep their defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides run.out_dir)
    #[arg(long, value_name = "DIR", env = "PLOOD_OUT_DIR")]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing run.seeds
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Comma-separated score kinds replacing score.kinds
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    scores: Option<Vec<ScoreKind>>,
    /// Label-confidence weighting for the partial-energy score: raw-mean or z-score
    #[arg(long, value_name = "MODE")]
    glc_mode: Option<GlcMode>,
}

#[derive(Args, Clone)]
struct Staged {
    #[command(flatten)]
    common: Common,
    /// Stage files for an ablation layout instead of a plain experiment
    #[arg(long, value_name = "score|ssfe")]
    ablation: Option<AblationMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training, test and OOD sets of every seed
    GenerateData(Common),
    /// Rotation pretext training on the generated training set
    TrainSsfe(Common),
    /// Partial-label fine-tuning from the pretext checkpoint
    FinetunePll(Staged),
    /// Score the ID test set and every OOD set with the fine-tuned model
    Score(Staged),
    /// Compute metrics from the score files and write the report
    Evaluate(Staged),
    /// All stages in one process
    RunExperiment(Common),
    /// Compare every score on one model, or models with and without pretext training
    RunAblation {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "score|ssfe")]
        ablation: AblationMode,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(at(Stage::Config))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seeds) = &c.seed_override {
        cfg.seeds = seeds.clone();
    }
    if let Some(kinds) = &c.scores {
        cfg.score.kinds = kinds.clone();
    }
    if let Some(mode) = c.glc_mode {
        cfg.score.glc_mode = mode;
    }
    cfg.validate().map_err(at(Stage::Config))?;
    Ok(cfg)
}

fn mode_of(ablation: Option<AblationMode>) -> ReportMode {
    ablation.map_or(ReportMode::Experiment, Into::into)
}

fn io(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::new(stage, format!("{}: {e}", path.display()))
}

fn write(stage: Stage, path: PathBuf, text: &str) -> Result<(), ExperimentError> {
    fs::write(&path, text).map_err(io(stage, &path))?;
    println!("{}", path.display());
    Ok(())
}

fn generate_data(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    for &seed in &cfg.seeds {
        let data = Datasets::generate(cfg, seed).map_err(at(Stage::GenerateData))?;
        for path in data.save(&data_dir(&cfg.out_dir, seed)).map_err(at(Stage::GenerateData))? {
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn train_ssfe(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    for &seed in &cfg.seeds {
        let train = load_dataset(&data_dir(&cfg.out_dir, seed).join("train.plod")).map_err(at(Stage::TrainSsfe))?;
        let (params, log) = pretrain(cfg, seed, &train, Arm::WithSsfe)?;
        let dir = model_dir(&cfg.out_dir, seed, Arm::WithSsfe);
        fs::create_dir_all(&dir).map_err(io(Stage::TrainSsfe, &dir))?;
        let path = dir.join("ssfe.plck");
        save_checkpoint(&params, &path).map_err(at(Stage::TrainSsfe))?;
        println!("{}", path.display());
        write(Stage::TrainSsfe, dir.join("ssfe_log.csv"), &log.unwrap_or_default().to_csv())?;
    }
    Ok(())
}

fn finetune_pll(cfg: &ExperimentConfig, mode: ReportMode) -> Result<(), ExperimentError> {
    let (_, arms) = plan(cfg, mode);
    for &seed in &cfg.seeds {
        let train = load_dataset(&data_dir(&cfg.out_dir, seed).join("train.plod")).map_err(at(Stage::FinetunePll))?;
        for &arm in &arms {
            let dir = model_dir(&cfg.out_dir, seed, arm);
            let start = match arm {
                Arm::WithSsfe => load_checkpoint(&dir.join("ssfe.plck")).map_err(at(Stage::FinetunePll))?,
                Arm::WithoutSsfe => pretrain(cfg, seed, &train, arm)?.0,
            };
            let (params, confidence, log) = finetune(cfg, seed, &train, &start)?;
            fs::create_dir_all(&dir).map_err(io(Stage::FinetunePll, &dir))?;
            let path = dir.join("pll.plck");
            save_checkpoint(&params, &path).map_err(at(Stage::FinetunePll))?;
            println!("{}", path.display());
            let path = dir.join("confidence.plcm");
            save_confidence(&confidence, &path).map_err(at(Stage::FinetunePll))?;
            println!("{}", path.display());
            write(Stage::FinetunePll, dir.join("pll_log.csv"), &log.to_csv())?;
        }
    }
    Ok(())
}

fn final_ssfe_loss(dir: &Path) -> Result<Option<f64>, ExperimentError> {
    let path = dir.join("ssfe_log.csv");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io(Stage::Score, &path))?;
    let log = SsfeLog::from_csv(&text).map_err(at(Stage::Score))?;
    Ok(log.epochs.last().map(|e| e.l_ssfe))
}

fn score(cfg: &ExperimentConfig, mode: ReportMode) -> Result<(), ExperimentError> {
    let (kinds, arms) = plan(cfg, mode);
    for &seed in &cfg.seeds {
        let data = Datasets::load(&data_dir(&cfg.out_dir, seed), &cfg.data.ood_kinds).map_err(at(Stage::Score))?;
        for &arm in &arms {
            let dir = model_dir(&cfg.out_dir, seed, arm);
            let params = load_checkpoint(&dir.join("pll.plck")).map_err(at(Stage::Score))?;
            let confidence = load_confidence(&dir.join("confidence.plcm")).map_err(at(Stage::Score))?;
            let scored = score_model(cfg, &params, &confidence, &data, &kinds)?;
            for (ood_kind, rows) in score_dumps(&scored.kinds) {
                let path = dir.join(format!("scores-{ood_kind}.csv"));
                let file = fs::File::create(&path).map_err(io(Stage::Score, &path))?;
                write_scores(file, &rows).map_err(at(Stage::Score))?;
                println!("{}", path.display());
            }
            let summary = ModelSummary {
                seed,
                arm,
                model_checksum: params.checksum(),
                id_accuracy: scored.id_accuracy,
                glc: scored.glc,
                final_ssfe_loss: final_ssfe_loss(&dir)?,
                mean_max_confidence: confidence.mean_row_max(),
            };
            let json = serde_json::to_string_pretty(&summary).map_err(at(Stage::Score))?;
            write(Stage::Score, dir.join(MODEL_SUMMARY_FILE), &json)?;
        }
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, mode: ReportMode) -> Result<(), ExperimentError> {
    let (_, arms) = plan(cfg, mode);
    let mut report = ScoreReport::new(mode, cfg.clone());
    for &seed in &cfg.seeds {
        for &arm in &arms {
            let dir = model_dir(&cfg.out_dir, seed, arm);
            let path = dir.join(MODEL_SUMMARY_FILE);
            let text = fs::read_to_string(&path).map_err(io(Stage::Evaluate, &path))?;
            let summary: ModelSummary = serde_json::from_str(&text).map_err(at(Stage::Evaluate))?;
            let mut dumps = Vec::with_capacity(cfg.data.ood_kinds.len());
            for &ood_kind in &cfg.data.ood_kinds {
                let path = dir.join(format!("scores-{ood_kind}.csv"));
                let file = fs::File::open(&path).map_err(io(Stage::Evaluate, &path))?;
                dumps.push((ood_kind, read_scores(file).map_err(at(Stage::Evaluate))?));
            }
            let kinds = kind_scores_from_dumps(&dumps)?;
            let (result, hist) = seed_result(&summary, &kinds, cfg.score.histogram_bins, 0)?;
            report.seeds.push(result);
            report.histograms.extend(hist);
        }
    }
    report.summarize();
    finish(&report, &cfg.out_dir)
}

fn finish(report: &ScoreReport, out: &Path) -> Result<(), ExperimentError> {
    for path in emit_report(report, &ReportFormat::ALL, out).map_err(at(Stage::Report))? {
        println!("{}", path.display());
    }
    for row in report.summary.iter().filter(|r| r.ood_kind.is_none()) {
        eprintln!(
            "{:<13} {:<12} AUPR-IN {:.4} ± {:.4}  FPR95 {:.4} ± {:.4}",
            row.arm.to_string(),
            row.kind.as_str(),
            row.aupr_in_mean,
            row.aupr_in_std,
            row.fpr95_mean,
            row.fpr95_std
        );
    }
    eprintln!("ID accuracy {:.4} ± {:.4}", report.id_accuracy_mean, report.id_accuracy_std);
    Ok(())
}

fn dispatch(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::GenerateData(c) => generate_data(&load_config(&c)?),
        Command::TrainSsfe(c) => train_ssfe(&load_config(&c)?),
        Command::FinetunePll(s) => finetune_pll(&load_config(&s.common)?, mode_of(s.ablation)),
        Command::Score(s) => score(&load_config(&s.common)?, mode_of(s.ablation)),
        Command::Evaluate(s) => evaluate(&load_config(&s.common)?, mode_of(s.ablation)),
        Command::RunExperiment(c) => {
            let cfg = load_config(&c)?;
            finish(&run_experiment(&cfg)?, &cfg.out_dir)
        }
        Command::RunAblation { common, ablation } => {
            let cfg = load_config(&common)?;
            finish(&run_ablation(&cfg, ablation)?, &cfg.out_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("plood: {e}");
            ExitCode::FAILURE
        }
    }
}
