use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::{sigma_grid, Schedule, ScheduleKind};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::gw::GwConfig;
use crate::modality::{Modality, Task};
use crate::objectives::LossWeights;
use crate::train::{EpochConfig, StepConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeStage {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

impl ProbeStage {
    pub fn train(&self) -> EpochConfig {
        EpochConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionStage {
    /// Key/query width.
    pub h: usize,
    /// Independent stage-3 runs per reported cell.
    pub seeds: usize,
    pub tasks: Vec<Task>,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
}

impl AttentionStage {
    pub fn train(&self) -> EpochConfig {
        EpochConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStage {
    pub sigma_grid: Vec<f64>,
    /// Train and test noise level of the generalization protocols.
    pub protocol_sigma: f64,
    /// Single training tasks swept by the leave-out-task protocol.
    pub leave_out_tasks: Vec<Task>,
    /// Designated modalities swept by the modality-generalization protocols.
    pub designated: Vec<Modality>,
}

/// Everything a run depends on. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub gw: GwConfig,
    pub loss: LossWeights,
    pub stage1: StepConfig,
    pub probes: ProbeStage,
    pub attention: AttentionStage,
    pub schedule: Schedule,
    pub eval: EvalStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            gw: GwConfig::default(),
            loss: LossWeights::default(),
            stage1: StepConfig {
                steps: 5_000,
                batch_size: 128,
                peak_lr: 3e-3,
            },
            probes: ProbeStage {
                hidden: 128,
                epochs: 3,
                batch_size: 128,
                peak_lr: 3e-3,
            },
            attention: AttentionStage {
                h: 64,
                seeds: 3,
                tasks: Task::ALL.to_vec(),
                epochs: 5,
                batch_size: 128,
                peak_lr: 3e-3,
            },
            schedule: Schedule::new(ScheduleKind::StandardPair, 5.0),
            eval: EvalStage {
                sigma_grid: sigma_grid(),
                protocol_sigma: 5.0,
                leave_out_tasks: Task::ALL.to_vec(),
                designated: Modality::ALL.to_vec(),
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.gw.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        for (name, b) in [
            ("stage1", self.stage1.batch_size),
            ("probes", self.probes.batch_size),
            ("attention", self.attention.batch_size),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
        }
        if self.stage1.batch_size < 2 {
            return Err(Error::Config(
                "stage1.batch_size must be at least 2 for the contrastive term".into(),
            ));
        }
        if self.attention.seeds == 0 {
            return Err(Error::Config("attention.seeds must be positive".into()));
        }
        if self.attention.tasks.is_empty() {
            return Err(Error::Config("attention.tasks must not be empty".into()));
        }
        if self.data.representation == 0 || self.data.classification == 0 || self.data.test == 0 {
            return Err(Error::Config("data splits must be non-empty".into()));
        }
        let grid = &self.eval.sigma_grid;
        if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 0.0 {
            return Err(Error::Config(
                "eval.sigma_grid must be non-empty, non-negative and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (the output directory is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config is always serializable");
        hex::encode(Sha256::digest(bytes))
    }
}
