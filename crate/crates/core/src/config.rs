//! Run presets and the optional config file that overrides them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DESK_COMPONENT_COUNT, DESK_PAIR_COUNT, PAPER_COMPONENT_COUNT, PAPER_PAIR_COUNT};
use crate::diffusion::{
    make_schedule, DiffusionError, ModelConfig, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_SAMPLING_STEPS, DEFAULT_T,
};
use crate::retrieval::DEFAULT_VOCABULARY_SIZE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<DiffusionError> for ConfigError {
    fn from(e: DiffusionError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32×32, runnable on one CPU core.
    Desk,
    /// 512×512 training parameters; recorded, not meant to run here.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub resolution: usize,
    pub schedule: ScheduleConfig,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub model_seed: u64,
    pub component_count: usize,
    pub pair_count: usize,
    pub vocabulary_size: usize,
    pub sampling_steps: usize,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let schedule = ScheduleConfig { t_max: DEFAULT_T, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END };
        match p {
            Preset::Desk => RunConfig {
                preset: p,
                resolution: 32,
                schedule,
                train_steps: 5000,
                batch_size: 8,
                lr: 1e-3,
                seed: 0,
                model_seed: 0,
                component_count: DESK_COMPONENT_COUNT,
                pair_count: DESK_PAIR_COUNT,
                vocabulary_size: DEFAULT_VOCABULARY_SIZE,
                sampling_steps: DEFAULT_SAMPLING_STEPS,
                checkpoint_every: 1000,
                model: ModelConfig::desk(),
            },
            Preset::Paper => RunConfig {
                preset: p,
                resolution: 512,
                schedule,
                train_steps: 400_000,
                batch_size: 4,
                lr: 1e-5,
                seed: 0,
                model_seed: 0,
                component_count: PAPER_COMPONENT_COUNT,
                pair_count: PAPER_PAIR_COUNT,
                vocabulary_size: DEFAULT_VOCABULARY_SIZE,
                sampling_steps: DEFAULT_SAMPLING_STEPS,
                checkpoint_every: 10_000,
                model: ModelConfig {
                    resolution: 512,
                    channels: vec![64, 128, 256, 256],
                    encoder_channels: vec![32, 64, 128, 256],
                    time_dim: 64,
                    embed_dim: 128,
                    ..ModelConfig::desk()
                },
            },
        }
    }

    /// Presets that would take more than a few minutes on one core.
    pub fn is_large(&self) -> bool {
        self.resolution > 64 || self.train_steps > 50_000
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.schedule.build()?;
        if self.model.resolution != self.resolution {
            return Err(ConfigError::Invalid(format!(
                "model resolution {} differs from run resolution {}",
                self.model.resolution, self.resolution
            )));
        }
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 || self.sampling_steps == 0 || self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid(
                "batch_size, lr, sampling_steps and checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Human-readable training parameters.
    pub fn summary(&self) -> String {
        format!(
            "preset={:?} resolution={}x{} batch_size={} lr={:e} steps={} T={} beta={}..{}",
            self.preset,
            self.resolution,
            self.resolution,
            self.batch_size,
            self.lr,
            self.train_steps,
            self.schedule.t_max,
            self.schedule.beta_start,
            self.schedule.beta_end
        )
        .to_lowercase()
    }

    /// Preset named in the file (or `fallback`), then the file's own fields.
    pub fn from_file(path: &Path, fallback: Preset) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        let parse_err = |msg: String| ConfigError::Parse { path: path.to_path_buf(), msg };
        let value: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
            serde_json::to_value(t).map_err(|e| parse_err(e.to_string()))?
        };
        Self::from_overrides(value, fallback).map_err(parse_err)
    }

    fn from_overrides(value: serde_json::Value, fallback: Preset) -> Result<Self, String> {
        let serde_json::Value::Object(over) = value else {
            return Err("top level must be a table".into());
        };
        let preset = match over.get("preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| e.to_string())?,
            None => fallback,
        };
        let mut base = serde_json::to_value(Self::preset(preset)).expect("presets serialize");
        merge(&mut base, &serde_json::Value::Object(over));
        serde_json::from_value(base).map_err(|e| e.to_string())
    }
}

/// Recursive table merge; `over` wins.
fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_SESSION_TTL_SECS: u64 = 3600;

/// Settings for `serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub refine_checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub session_ttl_secs: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            index: None,
            checkpoint: None,
            refine_checkpoint: None,
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            session_ttl_secs: DEFAULT_SESSION_TTL_SECS,
        }
    }
}

impl ServeConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        let parse_err = |msg: String| ConfigError::Parse { path: path.to_path_buf(), msg };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_pin_their_parameters() {
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.resolution, d.batch_size, d.lr, d.train_steps), (32, 8, 1e-3, 5000));
        d.validate().unwrap();
        assert!(!d.is_large());
        let p = RunConfig::preset(Preset::Paper);
        assert_eq!((p.resolution, p.batch_size, p.lr, p.train_steps), (512, 4, 1e-5, 400_000));
        p.validate().unwrap();
        assert!(p.is_large());
        assert!(p.summary().contains("512x512") && p.summary().contains("batch_size=4"));
    }

    #[test]
    fn file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "train_steps = 10\n[schedule]\nt_max = 100\n").unwrap();
        let c = RunConfig::from_file(&path, Preset::Desk).unwrap();
        assert_eq!(c.train_steps, 10);
        assert_eq!(c.schedule.t_max, 100);
        assert_eq!(c.schedule.beta_end, DEFAULT_BETA_END);
        assert_eq!(c.batch_size, 8);

        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"preset": "paper", "seed": 4}"#).unwrap();
        let c = RunConfig::from_file(&path, Preset::Desk).unwrap();
        assert_eq!((c.resolution, c.seed), (512, 4));

        std::fs::write(&path, r#"{"sede": 4}"#).unwrap();
        let e = RunConfig::from_file(&path, Preset::Desk).unwrap_err().to_string();
        assert!(e.contains("sede"), "{e}");
    }

    #[test]
    fn serve_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("serve.toml");
        std::fs::write(&path, "port = 9000\nindex = \"i.json\"\n").unwrap();
        let c = ServeConfig::from_file(&path).unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.session_ttl_secs, 3600);
        assert_eq!(c.index.as_deref(), Some(Path::new("i.json")));
    }
}
