//! Step rules: SGD (with optional momentum), the partially adaptive
//! Adam/Padam family with coupled or decoupled weight decay, and the
//! Lookahead wrapper.
//!
//! Every rule takes the learning rate for the current step explicitly; the
//! schedule lives elsewhere. States are plain values so they can be cloned,
//! compared and checkpointed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, GavgError, Result};
use crate::numerics::ParamVector;

fn check_grad(theta: &ParamVector, grad: &ParamVector) -> Result<()> {
    check_len(theta.len(), grad.len())?;
    grad.ensure_finite("gradient")
}

fn check_lr(alpha_t: f64) -> Result<()> {
    if alpha_t >= 0.0 && alpha_t.is_finite() {
        Ok(())
    } else {
        Err(GavgError::domain(format!(
            "learning rate must be >= 0, got {alpha_t}"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    /// Heavy-ball momentum coefficient.
    pub beta: f64,
    pub l2: f64,
    pub lambda_decoupled: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub momentum_buf: ParamVector,
    pub t: u64,
}

impl SgdState {
    pub fn new(len: usize) -> Self {
        SgdState {
            momentum_buf: ParamVector::zeros(len),
            t: 0,
        }
    }

    /// `buf <- beta*buf + (g + l2*theta)`, then
    /// `theta <- (1 - alpha*lambda)*theta - alpha*buf`.
    pub fn step(
        &mut self,
        theta: &mut ParamVector,
        grad: &ParamVector,
        alpha_t: f64,
        hyper: &SgdHyper,
    ) -> Result<()> {
        check_grad(theta, grad)?;
        check_len(theta.len(), self.momentum_buf.len())?;
        check_lr(alpha_t)?;
        if !(0.0..1.0).contains(&hyper.beta) {
            return Err(GavgError::domain(format!(
                "momentum {} outside [0,1)",
                hyper.beta
            )));
        }
        let shrink = 1.0 - alpha_t * hyper.lambda_decoupled;
        let buf = self.momentum_buf.as_mut_slice();
        for ((w, g), b) in theta.as_mut_slice().iter_mut().zip(grad.iter()).zip(buf) {
            let g_eff = g + hyper.l2 * *w;
            *b = hyper.beta * *b + g_eff;
            *w = shrink * *w - alpha_t * *b;
        }
        self.t += 1;
        theta.ensure_finite("sgd step")
    }
}

/// Where the stability constant enters the denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// `(v_hat + eps)^p`
    #[default]
    Inside,
    /// `v_hat^p + eps`
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Partial-adaptivity exponent; 0.5 is Adam, 0 is SGD-like.
    pub p: f64,
    pub lambda_decoupled: f64,
    pub l2: f64,
    pub amsgrad: bool,
    pub eps_placement: EpsPlacement,
}

impl Default for AdaptiveHyper {
    fn default() -> Self {
        AdaptiveHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            p: 0.5,
            lambda_decoupled: 0.0,
            l2: 0.0,
            amsgrad: false,
            eps_placement: EpsPlacement::Inside,
        }
    }
}

impl AdaptiveHyper {
    pub const GADAM_P: f64 = 0.5;
    pub const GADAMX_P: f64 = 0.125;

    pub fn adam(l2: f64) -> Self {
        AdaptiveHyper {
            l2,
            ..Default::default()
        }
    }

    pub fn adamw(lambda: f64) -> Self {
        AdaptiveHyper {
            lambda_decoupled: lambda,
            ..Default::default()
        }
    }

    pub fn padam(l2: f64) -> Self {
        AdaptiveHyper {
            p: Self::GADAMX_P,
            l2,
            ..Default::default()
        }
    }

    pub fn padamw(lambda: f64) -> Self {
        AdaptiveHyper {
            p: Self::GADAMX_P,
            lambda_decoupled: lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.p) {
            return Err(GavgError::domain(format!(
                "p = {} outside [0, 0.5]",
                self.p
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GavgError::domain("moment decay rates must lie in [0,1)"));
        }
        if !(self.eps > 0.0) {
            return Err(GavgError::domain("eps must be > 0"));
        }
        if self.l2 < 0.0 || self.lambda_decoupled < 0.0 {
            return Err(GavgError::domain("weight decay coefficients must be >= 0"));
        }
        Ok(())
    }

    #[inline]
    fn denominator(&self, v_hat: f64) -> f64 {
        let pow = |x: f64| {
            if self.p == 0.5 {
                x.sqrt()
            } else {
                x.powf(self.p)
            }
        };
        match self.eps_placement {
            EpsPlacement::Inside => pow(v_hat + self.eps),
            EpsPlacement::Outside => pow(v_hat) + self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub v_hat_max: ParamVector,
    pub t: u64,
}

impl AdaptiveState {
    pub fn new(len: usize) -> Self {
        AdaptiveState {
            m: ParamVector::zeros(len),
            v: ParamVector::zeros(len),
            v_hat_max: ParamVector::zeros(len),
            t: 0,
        }
    }

    /// One partially adaptive step with two-stage bias correction:
    /// moments are accumulated uncorrected, then divided by `1 - beta^t`.
    pub fn step(
        &mut self,
        theta: &mut ParamVector,
        grad: &ParamVector,
        hyper: &AdaptiveHyper,
        alpha_t: f64,
    ) -> Result<()> {
        hyper.validate()?;
        check_lr(alpha_t)?;
        check_grad(theta, grad)?;
        check_len(theta.len(), self.m.len())?;

        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - hyper.beta1.powf(t);
        let bc2 = 1.0 - hyper.beta2.powf(t);
        let shrink = 1.0 - alpha_t * hyper.lambda_decoupled;

        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        let vmax = self.v_hat_max.as_mut_slice();
        for (i, w) in theta.as_mut_slice().iter_mut().enumerate() {
            let g = grad[i] + hyper.l2 * *w;
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let mut v_hat = v[i] / bc2;
            if hyper.amsgrad {
                vmax[i] = vmax[i].max(v_hat);
                v_hat = vmax[i];
            }
            *w = shrink * *w - alpha_t * m_hat / hyper.denominator(v_hat);
        }
        theta.ensure_finite("adaptive step")
    }
}

/// Slow/fast weight bookkeeping for Lookahead.
#[derive(Clone, Debug, PartialEq)]
pub struct LookaheadState {
    pub slow: ParamVector,
    pub k: u32,
    pub alpha_slow: f64,
    pub step_in_cycle: u32,
}

impl LookaheadState {
    pub const DEFAULT_K: u32 = 5;
    pub const DEFAULT_ALPHA: f64 = 0.5;

    pub fn new(initial: &ParamVector, k: u32, alpha_slow: f64) -> Result<Self> {
        if k == 0 {
            return Err(GavgError::domain("lookahead k must be >= 1"));
        }
        if !(alpha_slow > 0.0 && alpha_slow <= 1.0) {
            return Err(GavgError::domain(format!(
                "alpha_slow {alpha_slow} outside (0,1]"
            )));
        }
        Ok(LookaheadState {
            slow: initial.clone(),
            k,
            alpha_slow,
            step_in_cycle: 0,
        })
    }

    /// Call after every inner step. On the k-th step of a cycle the slow
    /// weights move toward `fast` and `fast` is reset to them. Returns
    /// whether a sync happened.
    pub fn sync(&mut self, fast: &mut ParamVector) -> Result<bool> {
        check_len(self.slow.len(), fast.len())?;
        self.step_in_cycle = (self.step_in_cycle + 1) % self.k;
        if self.step_in_cycle != 0 {
            return Ok(false);
        }
        for (s, f) in self.slow.as_mut_slice().iter_mut().zip(fast.as_mut_slice()) {
            *s += self.alpha_slow * (*f - *s);
            *f = *s;
        }
        Ok(true)
    }
}

/// Named optimizer configurations accepted by configs and the CLI.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    Sgd,
    SgdMomentum,
    Asgd,
    Adam,
    AdamW,
    Padam,
    PadamW,
    GadamInner,
    GadamXInner,
    Lookahead(Box<Preset>),
}

impl Preset {
    /// Whether the preset's weight decay is applied as a decoupled shrink.
    pub fn decoupled(&self) -> bool {
        match self {
            Preset::AdamW | Preset::PadamW | Preset::GadamInner | Preset::GadamXInner => true,
            Preset::Lookahead(inner) => inner.decoupled(),
            _ => false,
        }
    }

    pub fn is_adaptive(&self) -> bool {
        match self {
            Preset::Sgd | Preset::SgdMomentum | Preset::Asgd => false,
            Preset::Lookahead(inner) => inner.is_adaptive(),
            _ => true,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Preset::Sgd => "sgd",
            Preset::SgdMomentum => "sgd_momentum",
            Preset::Asgd => "asgd",
            Preset::Adam => "adam",
            Preset::AdamW => "adamw",
            Preset::Padam => "padam",
            Preset::PadamW => "padamw",
            Preset::GadamInner => "gadam_inner",
            Preset::GadamXInner => "gadamx_inner",
            Preset::Lookahead(inner) => return write!(f, "lookahead({inner})"),
        };
        f.write_str(name)
    }
}

impl FromStr for Preset {
    type Err = GavgError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("lookahead(") {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| GavgError::config(format!("unterminated preset {s:?}")))?;
            let inner: Preset = inner.parse()?;
            if matches!(inner, Preset::Lookahead(_)) {
                return Err(GavgError::config("nested lookahead is not supported"));
            }
            return Ok(Preset::Lookahead(Box::new(inner)));
        }
        Ok(match s {
            "sgd" => Preset::Sgd,
            "sgd_momentum" => Preset::SgdMomentum,
            "asgd" => Preset::Asgd,
            "adam" => Preset::Adam,
            "adamw" => Preset::AdamW,
            "padam" => Preset::Padam,
            "padamw" => Preset::PadamW,
            "gadam_inner" => Preset::GadamInner,
            "gadamx_inner" => Preset::GadamXInner,
            other => {
                return Err(GavgError::config(format!(
                    "unknown optimizer preset {other:?}"
                )))
            }
        })
    }
}

impl Serialize for Preset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Optional knobs layered over a preset's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amsgrad: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_placement: Option<EpsPlacement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub preset: Preset,
    /// Routed to decoupled decay or coupled L2 depending on the preset.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "is_default_overrides")]
    pub overrides: HyperOverrides,
}

fn is_default_overrides(o: &HyperOverrides) -> bool {
    *o == HyperOverrides::default()
}

impl OptimizerConfig {
    pub fn new(preset: Preset, weight_decay: f64) -> Self {
        OptimizerConfig {
            preset,
            weight_decay,
            overrides: HyperOverrides::default(),
        }
    }
}

/// Serializable optimizer state, see [`Optimizer::export_state`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub counters: Vec<u64>,
    pub vectors: Vec<ParamVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd {
        hyper: SgdHyper,
        state: SgdState,
    },
    Adaptive {
        hyper: AdaptiveHyper,
        state: AdaptiveState,
    },
    Lookahead {
        inner: Box<Optimizer>,
        state: LookaheadState,
    },
}

impl Optimizer {
    pub fn build(cfg: &OptimizerConfig, theta0: &ParamVector) -> Result<Self> {
        Self::build_preset(&cfg.preset, cfg.weight_decay, &cfg.overrides, theta0)
    }

    fn build_preset(
        preset: &Preset,
        wd: f64,
        o: &HyperOverrides,
        theta0: &ParamVector,
    ) -> Result<Self> {
        if wd < 0.0 {
            return Err(GavgError::config("weight_decay must be >= 0"));
        }
        let len = theta0.len();
        let (l2, lambda) = if preset.decoupled() {
            (0.0, wd)
        } else {
            (wd, 0.0)
        };
        let opt = match preset {
            Preset::Sgd | Preset::Asgd | Preset::SgdMomentum => {
                let default_beta = if *preset == Preset::SgdMomentum {
                    0.9
                } else {
                    0.0
                };
                let hyper = SgdHyper {
                    beta: o.momentum.unwrap_or(default_beta),
                    l2,
                    lambda_decoupled: lambda,
                };
                if !(0.0..1.0).contains(&hyper.beta) {
                    return Err(GavgError::config("momentum must lie in [0,1)"));
                }
                Optimizer::Sgd {
                    hyper,
                    state: SgdState::new(len),
                }
            }
            Preset::Lookahead(inner) => {
                let inner = Self::build_preset(inner, wd, o, theta0)?;
                let state = LookaheadState::new(
                    theta0,
                    o.lookahead_k.unwrap_or(LookaheadState::DEFAULT_K),
                    o.lookahead_alpha.unwrap_or(LookaheadState::DEFAULT_ALPHA),
                )?;
                Optimizer::Lookahead {
                    inner: Box::new(inner),
                    state,
                }
            }
            _ => {
                let p = match preset {
                    Preset::Padam | Preset::PadamW | Preset::GadamXInner => AdaptiveHyper::GADAMX_P,
                    _ => AdaptiveHyper::GADAM_P,
                };
                let d = AdaptiveHyper::default();
                let hyper = AdaptiveHyper {
                    beta1: o.beta1.unwrap_or(d.beta1),
                    beta2: o.beta2.unwrap_or(d.beta2),
                    eps: o.eps.unwrap_or(d.eps),
                    p: o.p.unwrap_or(p),
                    lambda_decoupled: lambda,
                    l2,
                    amsgrad: o.amsgrad.unwrap_or(false),
                    eps_placement: o.eps_placement.unwrap_or_default(),
                };
                hyper
                    .validate()
                    .map_err(|e| GavgError::config(e.to_string()))?;
                Optimizer::Adaptive {
                    hyper,
                    state: AdaptiveState::new(len),
                }
            }
        };
        Ok(opt)
    }

    pub fn step(
        &mut self,
        theta: &mut ParamVector,
        grad: &ParamVector,
        alpha_t: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd { hyper, state } => state.step(theta, grad, alpha_t, hyper),
            Optimizer::Adaptive { hyper, state } => state.step(theta, grad, hyper, alpha_t),
            Optimizer::Lookahead { inner, state } => {
                inner.step(theta, grad, alpha_t)?;
                state.sync(theta).map(|_| ())
            }
        }
    }

    /// Counters and state vectors in a fixed order, for checkpoints.
    /// Hyperparameters are not included; they are rebuilt from the config.
    pub fn export_state(&self) -> OptState {
        let mut out = OptState::default();
        self.export_into(&mut out);
        out
    }

    fn export_into(&self, out: &mut OptState) {
        match self {
            Optimizer::Sgd { state, .. } => {
                out.counters.push(state.t);
                out.vectors.push(state.momentum_buf.clone());
            }
            Optimizer::Adaptive { state, .. } => {
                out.counters.push(state.t);
                out.vectors
                    .extend([state.m.clone(), state.v.clone(), state.v_hat_max.clone()]);
            }
            Optimizer::Lookahead { inner, state } => {
                inner.export_into(out);
                out.counters.push(u64::from(state.step_in_cycle));
                out.vectors.push(state.slow.clone());
            }
        }
    }

    /// Inverse of [`export_state`](Self::export_state) for an optimizer
    /// built from the same config.
    pub fn import_state(&mut self, saved: &OptState) -> Result<()> {
        let mut c = saved.counters.iter().copied();
        let mut v = saved.vectors.iter().cloned();
        self.import_from(&mut c, &mut v)?;
        if c.next().is_some() || v.next().is_some() {
            return Err(GavgError::Checkpoint(
                "optimizer state has trailing entries".into(),
            ));
        }
        Ok(())
    }

    fn import_from(
        &mut self,
        c: &mut impl Iterator<Item = u64>,
        v: &mut impl Iterator<Item = ParamVector>,
    ) -> Result<()> {
        let missing = || GavgError::Checkpoint("optimizer state is truncated".into());
        let vec_like =
            |v: &mut dyn Iterator<Item = ParamVector>, like: &ParamVector| -> Result<ParamVector> {
                let x = v.next().ok_or_else(missing)?;
                check_len(like.len(), x.len())?;
                Ok(x)
            };
        match self {
            Optimizer::Sgd { state, .. } => {
                state.t = c.next().ok_or_else(missing)?;
                state.momentum_buf = vec_like(v, &state.momentum_buf)?;
            }
            Optimizer::Adaptive { state, .. } => {
                state.t = c.next().ok_or_else(missing)?;
                state.m = vec_like(v, &state.m)?;
                state.v = vec_like(v, &state.v)?;
                state.v_hat_max = vec_like(v, &state.v_hat_max)?;
            }
            Optimizer::Lookahead { inner, state } => {
                inner.import_from(c, v)?;
                let step = c.next().ok_or_else(missing)?;
                state.step_in_cycle = u32::try_from(step)
                    .ok()
                    .filter(|s| *s < state.k)
                    .ok_or_else(|| {
                        GavgError::Checkpoint("lookahead cycle position out of range".into())
                    })?;
                state.slow = vec_like(v, &state.slow)?;
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Sgd { state, .. } => state.t,
            Optimizer::Adaptive { state, .. } => state.t,
            Optimizer::Lookahead { inner, .. } => inner.steps_taken(),
        }
    }
}
