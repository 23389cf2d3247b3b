//! Run configuration files and the metadata stored alongside checkpoints.

use crate::error::CliError;
use decompnet::data::{DataConfig, Dataset, Standardization};
use decompnet::network::ArchSpec;
use decompnet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a `train` run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Write a checkpoint every N epochs; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.train.validate()?;
        cfg.arch.build()?;
        Ok(cfg)
    }
}

/// Stored in every checkpoint so later commands can rebuild the data
/// pipeline without the original config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub standardization: Option<Standardization>,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
}

impl CheckpointMeta {
    pub fn from_json(value: &serde_json::Value) -> Result<Self, CliError> {
        serde_json::from_value(value.clone()).map_err(|e| {
            CliError::Usage(format!("checkpoint metadata is not from a train run: {e}"))
        })
    }
}

/// Evaluation data: the held-out split when one is configured, otherwise the
/// whole dataset. The training split is returned for batch-norm calibration.
pub struct EvalData {
    pub train: Dataset,
    pub eval: Dataset,
    pub split: &'static str,
}

/// Load and split data as the training run did, then apply the stored
/// statistics rather than refitting them.
pub fn eval_data(
    data: &DataConfig,
    seed: u64,
    standardization: Option<&Standardization>,
    base: &Path,
) -> Result<EvalData, CliError> {
    let all = data.source.load(base)?;
    let (mut train, held_out) = if data.validation > 0.0 {
        let (t, v) = all.split(data.validation, seed)?;
        (t, Some(v))
    } else {
        (all, None)
    };
    if let Some(s) = standardization {
        s.apply(&mut train)?;
    }
    let (eval, split) = match held_out {
        Some(mut v) => {
            if let Some(s) = standardization {
                s.apply(&mut v)?;
            }
            (v, "validation")
        }
        None => (train.clone(), "train"),
    };
    Ok(EvalData { train, eval, split })
}
