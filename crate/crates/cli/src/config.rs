//! Run configuration: a preset, overlaid by an optional TOML file, overlaid
//! by command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use mtbit::augment::AugSpec;
use mtbit::data::SynthSpec;
use mtbit::model::ModelConfig;
use mtbit::training::TrainConfig;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

/// Bad input from the user: flags, config keys or values. Exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size model and schedule.
    #[default]
    Full,
    /// Tiny model, full schedule.
    Tiny,
    /// Tiny model, short schedule, small synthetic dataset.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, train, synth) = match p {
            Preset::Full => (ModelConfig::default(), TrainConfig::default(), SynthSpec::default()),
            Preset::Tiny => {
                let m = ModelConfig::tiny();
                let t = TrainConfig {
                    augment: AugSpec {
                        target_size: m.input_size,
                        shift_px: 1.0,
                        ..AugSpec::default()
                    },
                    ..TrainConfig::default()
                };
                (m, t, SynthSpec::default())
            }
            Preset::Desk => {
                let m = ModelConfig::tiny();
                let t = TrainConfig::desk(m.input_size);
                (m, t, SynthSpec::desk(8, 0))
            }
        };
        Self {
            preset: p,
            dataset: None,
            out: None,
            model,
            train,
            synth,
        }
    }

    /// Resolves the preset (flag, else the file's `preset` key, else
    /// `fallback`) and overlays the file on it. Unknown keys are rejected.
    pub fn load(file: Option<&Path>, preset: Option<Preset>, fallback: Preset) -> Result<Self> {
        let table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| usage(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let file_preset = match table.get("preset") {
            Some(v) => Some(
                Preset::deserialize(v.clone()).map_err(|e| usage(format!("config key `preset`: {e}")))?,
            ),
            None => None,
        };
        let p = preset.or(file_preset).unwrap_or(fallback);
        let mut base = toml::Table::try_from(Self::preset(p)).context("serializing preset")?;
        merge(&mut base, table);
        base.insert("preset".into(), toml::Value::try_from(p)?);
        let cfg = Self::deserialize(base).map_err(|e| usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.synth.validate().map_err(|e| usage(e.to_string()))?;
        if self.train.augment.target_size != self.model.input_size {
            return Err(usage(format!(
                "train.augment.target_size {} differs from model.input_size {}",
                self.train.augment.target_size, self.model.input_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration next to the run's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Recursive overlay: tables merge key by key, everything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
