//! Tail iterate averaging, weight EMA, the patience trigger used to start
//! averaging automatically, and batch-norm statistic recomputation at the
//! averaged point.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, GavgError, Result};
use crate::numerics::ParamVector;
use crate::tasks::{DataBatch, TaskModel};

/// How often snapshots are taken once averaging is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AvgFreq {
    /// Once at the end of every epoch.
    #[default]
    Epoch,
    /// Every `n` optimizer iterations.
    Iterations(u64),
}

impl Serialize for AvgFreq {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AvgFreq::Epoch => s.serialize_str("epoch"),
            AvgFreq::Iterations(n) => s.serialize_u64(*n),
        }
    }
}

impl<'de> Deserialize<'de> for AvgFreq {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("avg.freq must be >= 1")),
            Raw::Int(n) => Ok(AvgFreq::Iterations(n)),
            Raw::Str(s) if s == "epoch" => Ok(AvgFreq::Epoch),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad avg.freq {s:?}"))),
        }
    }
}

/// When averaging begins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AvgStart {
    /// Epoch index (0-based) of the first epoch that contributes snapshots.
    Epoch(u64),
    /// Patience trigger on the validation metric.
    Auto,
}

impl Serialize for AvgStart {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AvgStart::Epoch(e) => s.serialize_u64(*e),
            AvgStart::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for AvgStart {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(AvgStart::Epoch(n)),
            Raw::Str(s) if s == "auto" => Ok(AvgStart::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad avg.start {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvgKind {
    #[default]
    Ia,
    Ema,
}

/// The `avg.*` config block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvgConfig {
    /// Defaults to half the epoch budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<AvgStart>,
    #[serde(default)]
    pub freq: AvgFreq,
    #[serde(default)]
    pub kind: AvgKind,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_patience")]
    pub patience: u32,
}

fn default_rho() -> f64 {
    0.99
}

fn default_patience() -> u32 {
    TriggerState::DEFAULT_PATIENCE
}

impl Default for AvgConfig {
    fn default() -> Self {
        AvgConfig {
            start: None,
            freq: AvgFreq::Epoch,
            kind: AvgKind::Ia,
            rho: default_rho(),
            patience: default_patience(),
        }
    }
}

impl AvgConfig {
    pub fn start_epoch(&self, epochs: u64) -> Option<u64> {
        match self.start {
            Some(AvgStart::Epoch(e)) => Some(e),
            Some(AvgStart::Auto) => None,
            None => Some(epochs / 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AvgKind::Ema && !(0.0..1.0).contains(&self.rho) {
            return Err(GavgError::config(format!(
                "avg.rho {} outside [0,1)",
                self.rho
            )));
        }
        if self.patience == 0 && self.start == Some(AvgStart::Auto) {
            return Err(GavgError::config("avg.patience must be >= 1"));
        }
        Ok(())
    }
}

/// Running arithmetic mean of absorbed snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragerState {
    pub theta_avg: ParamVector,
    pub n_models: u64,
    pub t_avg_start: u64,
    pub freq: u64,
    /// Index passed to every successful absorption, in order.
    pub log: Vec<u64>,
}

impl AveragerState {
    pub fn new(len: usize, t_avg_start: u64, freq: u64) -> Result<Self> {
        if freq == 0 {
            return Err(GavgError::domain("averaging frequency must be >= 1"));
        }
        Ok(AveragerState {
            theta_avg: ParamVector::zeros(len),
            n_models: 0,
            t_avg_start,
            freq,
            log: Vec::new(),
        })
    }

    /// Whether index `t` is on the snapshot grid.
    pub fn is_due(&self, t: u64) -> bool {
        t >= self.t_avg_start && (t - self.t_avg_start) % self.freq == 0
    }

    /// Absorbs `theta_t` if `t` is due; returns whether it was absorbed.
    pub fn offer(&mut self, t: u64, theta_t: &ParamVector) -> Result<bool> {
        if !self.is_due(t) {
            return Ok(false);
        }
        self.absorb(theta_t)?;
        self.log.push(t);
        Ok(true)
    }

    /// Unconditional running-mean update: after k calls `theta_avg` is the
    /// plain mean of the k snapshots.
    pub fn absorb(&mut self, theta_t: &ParamVector) -> Result<()> {
        check_len(self.theta_avg.len(), theta_t.len())?;
        let weight = 1.0 / (self.n_models as f64 + 1.0);
        for (a, x) in self.theta_avg.as_mut_slice().iter_mut().zip(theta_t.iter()) {
            *a += (x - *a) * weight;
        }
        self.n_models += 1;
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.n_models > 0
    }
}

/// Exponential moving average of snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub theta_ema: ParamVector,
    pub rho: f64,
    pub count: u64,
}

impl EmaState {
    pub fn new(initial: ParamVector, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(GavgError::domain(format!("rho {rho} outside [0,1)")));
        }
        Ok(EmaState {
            theta_ema: initial,
            rho,
            count: 0,
        })
    }

    /// `ema <- rho*ema + (1-rho)*theta_t`
    pub fn absorb(&mut self, theta_t: &ParamVector) -> Result<()> {
        check_len(self.theta_ema.len(), theta_t.len())?;
        let rho = self.rho;
        for (e, x) in self.theta_ema.as_mut_slice().iter_mut().zip(theta_t.iter()) {
            *e = rho * *e + (1.0 - rho) * x;
        }
        self.count += 1;
        Ok(())
    }
}

/// Patience trigger on a lower-is-better metric. Latches once fired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub best_metric: f64,
    pub epochs_since_improvement: u32,
    pub patience: u32,
    pub fired: bool,
}

impl TriggerState {
    pub const DEFAULT_PATIENCE: u32 = 10;

    pub fn new(patience: u32) -> Self {
        TriggerState {
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            fired: false,
        }
    }

    /// Feeds one observation; returns whether the trigger has fired.
    pub fn observe(&mut self, val_metric: f64) -> bool {
        if self.fired {
            return true;
        }
        if val_metric < self.best_metric {
            self.best_metric = val_metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        if self.epochs_since_improvement >= self.patience {
            self.fired = true;
        }
        self.fired
    }
}

/// Replaces the model's batch-norm running statistics with the exact
/// statistics of one forward pass over `data` at `theta_avg`. Every
/// other parameter of `model` is left untouched; `theta_avg` is installed.
pub fn recompute_bn_stats(
    model: &mut TaskModel,
    data: &[DataBatch],
    theta_avg: &ParamVector,
) -> Result<()> {
    check_len(model.num_params(), theta_avg.len())?;
    if data.iter().all(|b| b.len() == 0) {
        return Err(GavgError::domain(
            "batch-norm recomputation needs a nonempty data stream",
        ));
    }
    model.theta = theta_avg.clone();
    if model.bn_layer_count() == 0 {
        return Ok(());
    }
    let stats = model.population_bn_stats(data)?;
    model.bn_running = stats;
    Ok(())
}
