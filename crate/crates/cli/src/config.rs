//! Resolved experiment configuration, written next to every run's outputs.

use anyhow::{Context, Result};
use scoop_core::env::Mode;
use scoop_core::teleop::TeleopSettings;
use scoop_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "experiment.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub seed: u64,
    pub trials_per_sector: usize,
    pub object_trials: usize,
    pub multi_objects: usize,
    pub multi_episodes: usize,
    pub multi_seconds: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            trials_per_sector: 100,
            object_trials: 100,
            multi_objects: 10,
            multi_episodes: 100,
            multi_seconds: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StiSettings {
    pub buffer_size: usize,
}

impl Default for StiSettings {
    fn default() -> Self {
        Self {
            buffer_size: scoop_core::sti::STI_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub command: String,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub objects: Vec<String>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub sti: StiSettings,
    pub teleop: TeleopSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seeds: Vec::new(),
            out_dir: None,
            objects: vec!["cube".into(), "bucket".into(), "mug".into(), "foam-brick".into(), "potted-meat-can".into()],
            checkpoints: BTreeMap::new(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            sti: StiSettings::default(),
            teleop: TeleopSettings::default(),
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// is replaced.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Defaults for `mode` with an optional config file laid over them.
    pub fn resolve(mode: Mode, file: Option<&Path>) -> Result<Self> {
        Self::resolve_with(TrainConfig::for_mode(mode, 0), file)
    }

    /// Like [`resolve`](Self::resolve) with explicit training defaults.
    pub fn resolve_with(train: TrainConfig, file: Option<&Path>) -> Result<Self> {
        let base = Self {
            train,
            ..Self::default()
        };
        let Some(path) = file else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let top: toml::Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = toml::Value::try_from(&base)?;
        merge(&mut merged, top);
        let cfg: Self = merged
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, toml::to_string_pretty(self)?)?;
        Ok(path)
    }
}
