//! The JSON run configuration.
//!
//! ```json
//! {
//!   "model": { ... },
//!   "schedule": [{"layer": 2, "threshold": 0.3}, {"layer": 3, "threshold": 0.4}],
//!   "sweep": [[0.25, 0.35, 0.45], [0.3, 0.4, 0.5]],
//!   "train": { ... },
//!   "eval": {"tolerance": 0.0075, "thresholds": 99, "nms": true},
//!   "data": {"synthetic": {"spec": { ... }, "test_count": 50}},
//!   "output_dir": "runs/micro"
//! }
//! ```
//!
//! The top-level `schedule` is authoritative; a `schedule` inside `model`
//! must be absent, empty or equal to it.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::eval::EvalConfig;
use crate::model::SedConfig;
use crate::prune::{validate_schedule, PruneSchedule};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        spec: SynthSpec,
        #[serde(default = "default_test_count")]
        test_count: usize,
    },
    /// A dataset directory with a manifest.
    Dataset { path: PathBuf },
}

fn default_test_count() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: SedConfig,
    pub schedule: PruneSchedule,
    /// Threshold tuples applied positionally to the schedule's layers.
    #[serde(default)]
    pub sweep: Vec<Vec<f64>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// A run around `model`, with its schedule lifted to the top level.
    pub fn new(model: &SedConfig, data: DataSource, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: SedConfig {
                schedule: PruneSchedule::default(),
                ..model.clone()
            },
            schedule: model.schedule.clone(),
            sweep: Vec::new(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data,
            output_dir: output_dir.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The model configuration with the run's schedule.
    pub fn sed_config(&self) -> SedConfig {
        SedConfig {
            schedule: self.schedule.clone(),
            ..self.model.clone()
        }
    }

    /// Schedules of the sweep, each validated.
    pub fn sweep_schedules(&self) -> Result<Vec<PruneSchedule>> {
        self.sweep
            .iter()
            .map(|t| {
                let s = self.schedule.with_thresholds(t)?;
                validate_schedule(&s, self.model.depth).map_err(crate::prune::PruneError::from)?;
                Ok(s)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.model.schedule.is_empty() {
            if self.model.schedule != self.schedule {
                return Err(Error::Config(
                    "model.schedule differs from the top-level schedule".into(),
                ));
            }
        }
        self.sed_config().validate()?;
        self.train.validate()?;
        self.sweep_schedules()?;
        if !(self.eval.tolerance > 0.0 && self.eval.tolerance < 1.0) {
            return Err(Error::Config("eval.tolerance must lie in (0, 1)".into()));
        }
        if self.eval.thresholds < 2 {
            return Err(Error::Config("eval.thresholds must be at least 2".into()));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
            if spec.image_size != self.model.image_size {
                return Err(Error::Config(
                    "synthetic image size differs from the model input size".into(),
                ));
            }
        }
        Ok(())
    }
}
