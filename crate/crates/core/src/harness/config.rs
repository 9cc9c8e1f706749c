use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::AvgConfig;
use crate::error::{GavgError, Result};
use crate::optimizers::{OptimizerConfig, Preset};
use crate::schedules::ScheduleSpec;
use crate::tasks::TaskSpec;

pub const OUT_DIR_ENV: &str = "GAVG_OUT_DIR";

/// Which split the softmax snapshots are taken on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

/// Softmax snapshots of the current iterate at the end of epochs
/// `from, from + every, ...` (1-based epoch numbers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotPolicy {
    pub from: u64,
    #[serde(default = "one")]
    pub every: u64,
    #[serde(default)]
    pub split: Split,
}

fn one() -> u64 {
    1
}

impl SnapshotPolicy {
    pub fn is_due(&self, epoch: u64) -> bool {
        epoch >= self.from && (epoch - self.from) % self.every == 0
    }
}

/// Expansion axes for `grid`; every cell runs all of the config's seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub presets: Vec<Preset>,
    pub weight_decays: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub averaging: Option<AvgConfig>,
    pub epochs: u64,
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<SnapshotPolicy>,
    /// Checkpoint cadence in epochs; 0 saves only the initial checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Record wall-clock milliseconds. Off by default so that outputs are
    /// byte-for-byte reproducible.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timing: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| GavgError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GavgError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    /// SHA-256 of the canonical JSON with `seeds`, `out_dir` and `grid`
    /// removed, so every seed of one family shares a hash.
    pub fn family_hash(&self) -> String {
        let mut family = self.clone();
        family.seeds.clear();
        family.out_dir = None;
        family.grid = None;
        hex::encode(Sha256::digest(family.canonical_json().as_bytes()))
    }

    /// Fills `schedule.total_epochs` from `epochs` when absent.
    pub fn effective_schedule(&self) -> ScheduleSpec {
        let mut s = self.schedule.clone();
        s.total_epochs.get_or_insert(self.epochs as f64);
        s
    }

    /// `GAVG_OUT_DIR` wins over the config's `out_dir`.
    pub fn resolved_out_dir(&self) -> Option<PathBuf> {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.effective_schedule().validate()?;
        if let Some(avg) = &self.averaging {
            avg.validate()?;
        }
        if self.batch_size == 0 {
            return Err(GavgError::config("batch_size must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(GavgError::config("seeds must not be empty"));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(GavgError::config("weight_decay must be >= 0"));
        }
        if let Some(s) = &self.snapshots {
            if s.every == 0 || s.from == 0 {
                return Err(GavgError::config(
                    "snapshots.from and snapshots.every must be >= 1",
                ));
            }
        }
        if let Some(g) = &self.grid {
            if g.presets.is_empty() || g.weight_decays.is_empty() {
                return Err(GavgError::config(
                    "grid needs at least one preset and one weight decay",
                ));
            }
            if g.weight_decays.iter().any(|w| !(*w >= 0.0)) {
                return Err(GavgError::config("grid weight decays must be >= 0"));
            }
        }
        Ok(())
    }
}
