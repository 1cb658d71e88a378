//! Experiment configuration as flat `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every key is optional; see [`ExperimentConfig::default`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{GlyphSpec, OodKind};
use crate::pll::{Cadence, PllConfig, UpdateInput};
use crate::scoring::{EnergyInput, GlcMode, ScoreKind};
use crate::ssfe::{Distance, SsfeConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub partial_rate: f64,
    pub pixel_noise: f64,
    pub ood_kinds: Vec<OodKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub kinds: Vec<ScoreKind>,
    pub glc_mode: GlcMode,
    pub energy_input: EnergyInput,
    pub energy_temperature: f64,
    pub odin_temperature: f64,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// The seed field is replaced by each run seed.
    pub ssfe: SsfeConfig,
    /// The seed field is replaced by each run seed.
    pub pll: PllConfig,
    pub score: ScoreConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub save_artifacts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                classes: 6,
                n_train: 1200,
                n_test: 400,
                n_ood: 400,
                partial_rate: 0.1,
                pixel_noise: 0.15,
                ood_kinds: OodKind::ALL.to_vec(),
            },
            ssfe: SsfeConfig::default(),
            pll: PllConfig::default(),
            score: ScoreConfig {
                kinds: ScoreKind::ALL.to_vec(),
                glc_mode: GlcMode::RawMean,
                energy_input: EnergyInput::Probabilities,
                energy_temperature: 1.0,
                odin_temperature: 1000.0,
                histogram_bins: 20,
            },
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("plood-out"),
            save_artifacts: true,
        }
    }
}

fn list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

fn scalar<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn keyword<T: serde::de::DeserializeOwned>(value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| "unrecognized keyword".to_string())
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn kebab<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum"),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|reason| match reason {
                None => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                Some(reason) => ConfigError::Value {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// `Err(None)` for an unknown key.
    fn set(&mut self, key: &str, v: &str) -> Result<(), Option<String>> {
        let d = &mut self.data;
        match key {
            "data.classes" => d.classes = scalar(v)?,
            "data.n_train" => d.n_train = scalar(v)?,
            "data.n_test" => d.n_test = scalar(v)?,
            "data.n_ood" => d.n_ood = scalar(v)?,
            "data.partial_rate" => d.partial_rate = scalar(v)?,
            "data.pixel_noise" => d.pixel_noise = scalar(v)?,
            "data.ood_kinds" => d.ood_kinds = list(v)?,
            "ssfe.alpha" => self.ssfe.alpha = scalar(v)?,
            "ssfe.rotations" => self.ssfe.rotations = scalar(v)?,
            "ssfe.epochs" => self.ssfe.epochs = scalar(v)?,
            "ssfe.lr" => self.ssfe.lr = scalar(v)?,
            "ssfe.batch_size" => self.ssfe.batch_size = scalar(v)?,
            "ssfe.distance" => self.ssfe.distance = keyword::<Distance>(v)?,
            "pll.epochs" => self.pll.epochs = scalar(v)?,
            "pll.lr" => self.pll.lr = scalar(v)?,
            "pll.batch_size" => self.pll.batch_size = scalar(v)?,
            "pll.cadence" => self.pll.cadence = keyword::<Cadence>(v)?,
            "pll.update_input" => self.pll.update_input = keyword::<UpdateInput>(v)?,
            "score.kinds" => self.score.kinds = list(v)?,
            "score.glc_mode" => self.score.glc_mode = scalar(v)?,
            "score.energy_input" => self.score.energy_input = keyword::<EnergyInput>(v)?,
            "score.energy_temperature" => self.score.energy_temperature = scalar(v)?,
            "score.odin_temperature" => self.score.odin_temperature = scalar(v)?,
            "score.histogram_bins" => self.score.histogram_bins = scalar(v)?,
            "run.seeds" => self.seeds = list(v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.save_artifacts" => self.save_artifacts = scalar(v)?,
            _ => return Err(None),
        }
        Ok(())
    }

    /// Text form that [`ExperimentConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data.classes", d.classes.to_string());
        put("data.n_train", d.n_train.to_string());
        put("data.n_test", d.n_test.to_string());
        put("data.n_ood", d.n_ood.to_string());
        put("data.partial_rate", d.partial_rate.to_string());
        put("data.pixel_noise", d.pixel_noise.to_string());
        put("data.ood_kinds", join(&d.ood_kinds));
        put("ssfe.alpha", self.ssfe.alpha.to_string());
        put("ssfe.rotations", self.ssfe.rotations.to_string());
        put("ssfe.epochs", self.ssfe.epochs.to_string());
        put("ssfe.lr", self.ssfe.lr.to_string());
        put("ssfe.batch_size", self.ssfe.batch_size.to_string());
        put("ssfe.distance", kebab(&self.ssfe.distance));
        put("pll.epochs", self.pll.epochs.to_string());
        put("pll.lr", self.pll.lr.to_string());
        put("pll.batch_size", self.pll.batch_size.to_string());
        put("pll.cadence", kebab(&self.pll.cadence));
        put("pll.update_input", kebab(&self.pll.update_input));
        put("score.kinds", join(&self.score.kinds));
        put("score.glc_mode", self.score.glc_mode.to_string());
        put("score.energy_input", kebab(&self.score.energy_input));
        put("score.energy_temperature", self.score.energy_temperature.to_string());
        put("score.odin_temperature", self.score.odin_temperature.to_string());
        put("score.histogram_bins", self.score.histogram_bins.to_string());
        put("run.seeds", join(&self.seeds));
        put("run.out_dir", self.out_dir.display().to_string());
        put("run.save_artifacts", self.save_artifacts.to_string());
        s
    }

    pub fn glyph_spec(&self) -> Result<GlyphSpec, ConfigError> {
        GlyphSpec::standard(self.data.classes, self.data.pixel_noise).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let d = &self.data;
        self.glyph_spec()?;
        if d.n_train < d.classes || d.n_test < d.classes {
            return invalid(format!("need at least one instance per class, have {} train / {} test", d.n_train, d.n_test));
        }
        if d.n_ood == 0 || d.ood_kinds.is_empty() {
            return invalid("need at least one OOD instance and kind".into());
        }
        if !(0.0..=1.0).contains(&d.partial_rate) {
            return invalid(format!("partial rate {} outside [0, 1]", d.partial_rate));
        }
        self.ssfe.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pll.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.score.kinds.is_empty() {
            return invalid("score list is empty".into());
        }
        for t in [self.score.energy_temperature, self.score.odin_temperature] {
            if !(t > 0.0) {
                return invalid(format!("temperature {t} must be positive"));
            }
        }
        if self.score.histogram_bins == 0 {
            return invalid("histogram needs at least one bin".into());
        }
        if self.seeds.is_empty() {
            return invalid("seed list is empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.ssfe.lr, 1e-3);
        assert_eq!(cfg.ssfe.batch_size, 128);
        assert_eq!(cfg.data.partial_rate, 0.1);
        assert_eq!(cfg.ssfe.alpha, 0.5);

        let text = "# desk\n data.classes = 4\nrun.seeds = 7, 7\nscore.kinds = pe,energy\n\npll.cadence = step\nscore.glc_mode=z-score\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.data.classes, 4);
        assert_eq!(cfg.seeds, vec![7, 7]);
        assert_eq!(cfg.score.kinds, vec![ScoreKind::PartialEnergy, ScoreKind::Energy]);
        assert_eq!(cfg.pll.cadence, Cadence::Step);
        assert_eq!(cfg.score.glc_mode, GlcMode::ZScore);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.ood_kinds = vec![OodKind::Blob, OodKind::UniformNoise];
        cfg.pll.update_input = UpdateInput::Logits;
        cfg.score.energy_input = EnergyInput::Logits;
        cfg.ssfe.lr = 2.5e-4;
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(ExperimentConfig::parse("\nbogus"), Err(ConfigError::Syntax { line: 2 })));
        assert!(matches!(ExperimentConfig::parse("data.colors = 3"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("ssfe.epochs = many"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("pll.cadence = hourly"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("run.seeds ="), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("ssfe.alpha = 2"), Err(ConfigError::Invalid(_))));
    }
}
