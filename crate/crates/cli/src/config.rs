//! Run configuration: a TOML document with `model`, `train`, `data` and
//! `eval` sections layered over a named model preset.

use std::path::Path;

use moepot::data::MixtureSpec;
use moepot::eval::DEFAULT_HORIZONS;
use moepot::model::ModelConfig;
use moepot::train::TrainConfig;
use moepot::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Rollout horizons of the error-accumulation table.
    pub horizons: Vec<usize>,
    /// Blocks reported by `interpret`; empty means all.
    pub blocks: Vec<usize>,
    /// Frame pairs dumped as images per dataset.
    pub dump_frames: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { horizons: DEFAULT_HORIZONS.to_vec(), blocks: Vec::new(), dump_frames: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model preset the `model` section is layered over.
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: MixtureSpec,
    pub eval: EvalSection,
}

pub const DEFAULT_PRESET: &str = "desk";

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?} (expected tiny, small, medium or desk)")))?;
        Ok(RunConfig {
            preset: name.to_string(),
            model,
            train: TrainConfig::default(),
            data: MixtureSpec::default(),
            eval: EvalSection::default(),
        })
    }

    /// Parses a document; `model` keys override the preset named by the
    /// top-level `preset` key (or `preset_override` when given).
    pub fn parse(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let preset = match (preset_override, user.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            (None, None) => DEFAULT_PRESET.to_string(),
        };
        let base = RunConfig::from_preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("preset".into(), toml::Value::String(preset));
        let cfg: RunConfig = merged.try_into().map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text, preset_override)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

/// Overlays `user` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
