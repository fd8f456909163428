use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cvsnet::data::DatasetKind;
use cvsnet::model::ModelConfig;
use cvsnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub root: PathBuf,
}

/// Everything a run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<DataConfig>,
}

impl RunConfig {
    /// Accepts a full run config or a bare model config.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let is_run = value.as_object().is_some_and(|o| o.contains_key("model") || o.contains_key("train"));
        let cfg = if is_run {
            serde_json::from_value(value).with_context(|| format!("run config {}", path.display()))?
        } else {
            RunConfig {
                model: serde_json::from_value(value).with_context(|| format!("model config {}", path.display()))?,
                ..Default::default()
            }
        };
        Ok(cfg)
    }

    /// Key-sorted JSON; the input to the manifest's config hash.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }
}
