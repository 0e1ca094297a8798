//! The JSON run configuration: one section per pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::read_file;
use crate::degrade::Task;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::sampler::SampleConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_task: usize,
    /// Held-out pairs per task, from clean sources disjoint with training.
    pub eval_per_task: usize,
    pub tasks: Vec<Task>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_per_task: 16,
            eval_per_task: 8,
            tasks: Task::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_task == 0 {
            return Err(Error::InvalidConfig("n_per_task must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("at least one task is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::InvalidConfig(format!("{}: config is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.data.validate()
    }
}
