//! Desk-scale classification objectives with analytic gradients.

mod data;
mod model;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{GavgError, Result};
use crate::numerics::RngStream;

pub use data::{load_csv, make_blobs, parse_csv, DataBatch, Dataset};
pub use model::{
    Architecture, BnConfig, BnStats, EvalResult, LossGrad, Mode, TaskModel, LAYOUT_VERSION,
};

/// Stream ids carved out of a run seed.
pub(crate) const DATA_STREAM: u64 = 0;
pub(crate) const INIT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Logistic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        n: usize,
        d: usize,
        classes: usize,
        sep: f64,
        #[serde(default)]
        label_noise: f64,
        /// Fixes the dataset across run seeds when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        /// Inferred as `max label + 1` when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub bn: BnConfig,
    #[serde(default)]
    pub zero_init_final: bool,
    pub data: DataSpec,
}

impl TaskSpec {
    /// Names accepted by [`TaskSpec::builtin`].
    pub const BUILTINS: [&'static str; 3] = ["blobs_logistic", "blobs_mlp", "blobs_mlp_bn"];

    /// Blobs with `d=20, C=5, label_noise=0.1`; the MLP variants use two
    /// hidden layers of 32.
    pub fn builtin(name: &str) -> Result<Self> {
        let data = DataSpec::Blobs {
            n: 2000,
            d: 20,
            classes: 5,
            sep: 3.0,
            label_noise: 0.1,
            seed: None,
        };
        let (kind, hidden, batch_norm) = match name {
            "blobs_logistic" => (TaskKind::Logistic, vec![], false),
            "blobs_mlp" => (TaskKind::Mlp, vec![32, 32], false),
            "blobs_mlp_bn" => (TaskKind::Mlp, vec![32, 32], true),
            _ => {
                return Err(GavgError::config(format!(
                    "unknown task {name:?}; expected one of {:?}",
                    Self::BUILTINS
                )))
            }
        };
        Ok(TaskSpec {
            kind,
            hidden,
            batch_norm,
            bn: BnConfig::default(),
            zero_init_final: false,
            data,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Logistic if !self.hidden.is_empty() || self.batch_norm => Err(
                GavgError::config("logistic task takes no hidden layers or batch norm"),
            ),
            TaskKind::Mlp if self.hidden.is_empty() => {
                Err(GavgError::config("mlp task needs hidden layers"))
            }
            _ if !(self.bn.eps > 0.0) || !(0.0..=1.0).contains(&self.bn.momentum) => Err(
                GavgError::config("bn.eps must be > 0 and bn.momentum in [0,1]"),
            ),
            _ => Ok(()),
        }
    }

    pub fn is_convex(&self) -> bool {
        self.kind == TaskKind::Logistic
    }

    pub fn dataset(&self, run_seed: u64) -> Result<Dataset> {
        match &self.data {
            DataSpec::Blobs {
                n,
                d,
                classes,
                sep,
                label_noise,
                seed,
            } => {
                let mut rng = RngStream::new(seed.unwrap_or(run_seed), DATA_STREAM);
                make_blobs(&mut rng, *n, *d, *classes, *sep, *label_noise)
            }
            DataSpec::Csv { path, classes } => {
                let pool = load_csv(path)?;
                let c = match classes {
                    Some(c) => *c,
                    None => pool.labels.iter().max().map_or(0, |m| m + 1),
                };
                if c < 2 {
                    return Err(GavgError::config("CSV dataset needs at least two classes"));
                }
                Dataset::split(&pool, c, &mut RngStream::new(run_seed, DATA_STREAM))
            }
        }
    }

    pub fn architecture(&self, input: usize, classes: usize) -> Architecture {
        match self.kind {
            TaskKind::Logistic => Architecture::logistic(input, classes),
            TaskKind::Mlp => Architecture::mlp(input, &self.hidden, classes, self.batch_norm),
        }
    }

    /// Dataset plus a freshly initialised model, both derived from `run_seed`.
    pub fn instantiate(&self, run_seed: u64) -> Result<(Dataset, TaskModel)> {
        self.validate()?;
        let ds = self.dataset(run_seed)?;
        let arch = self.architecture(ds.dim(), ds.classes);
        let mut rng = RngStream::new(run_seed, INIT_STREAM);
        let model = TaskModel::init(arch, self.bn, &mut rng, self.zero_init_final)?;
        Ok((ds, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_instantiate() {
        for name in TaskSpec::BUILTINS {
            let spec = TaskSpec::builtin(name).unwrap();
            let (ds, model) = spec.instantiate(3).unwrap();
            assert_eq!(ds.dim(), 20);
            assert_eq!(model.arch.classes, 5);
            assert_eq!(
                model.bn_layer_count(),
                if name.ends_with("_bn") { 2 } else { 0 }
            );
        }
        assert!(TaskSpec::builtin("cifar").is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = TaskSpec::builtin("blobs_mlp_bn").unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: TaskSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn validation() {
        let mut spec = TaskSpec::builtin("blobs_logistic").unwrap();
        spec.hidden = vec![4];
        assert!(spec.validate().is_err());
        let mut spec = TaskSpec::builtin("blobs_mlp").unwrap();
        spec.hidden.clear();
        assert!(spec.validate().is_err());
    }
}
