//! Noisy quadratic laboratory.
//!
//! The true loss is `L(w) = 0.5 * sum_i lambda_i * w_i^2` in the Hessian
//! eigenbasis (so `L* = 0` at `w* = 0`), and every step observes the true
//! gradient plus isotropic Gaussian noise of variance `sigma2 / batch` per
//! coordinate. A diagonal preconditioner scales each coordinate's step by
//! `c_i` in `{1, lambda_i^-1/2, lambda_i^-1}`, giving the AR(1) recursion
//!
//! ```text
//! w_i <- (1 - alpha * lambda_i * c_i) * w_i - alpha * c_i * xi_i
//! ```
//!
//! Alongside the simulator live the closed-form predictions for the final
//! iterate, the iterate average and the EMA point, plus the asymptotic
//! regret bounds for averaged and last iterates.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, GavgError, Result};
use crate::numerics::{mean_var, ParamVector, RngStream};
use crate::parallel::{map_indexed, Parallelism};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preconditioner {
    #[default]
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "inv_sqrt_H")]
    InvSqrtH,
    #[serde(rename = "inv_H")]
    InvH,
}

impl Preconditioner {
    /// Eigenvalue of the inverse preconditioner along a direction with curvature `lambda`.
    pub fn scale(self, lambda: f64) -> f64 {
        match self {
            Preconditioner::Identity => 1.0,
            Preconditioner::InvSqrtH => 1.0 / lambda.sqrt(),
            Preconditioner::InvH => 1.0 / lambda,
        }
    }
}

impl FromStr for Preconditioner {
    type Err = GavgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Preconditioner::Identity),
            "inv_sqrt_H" | "inv_sqrt_h" => Ok(Preconditioner::InvSqrtH),
            "inv_H" | "inv_h" => Ok(Preconditioner::InvH),
            other => Err(GavgError::config(format!(
                "unknown preconditioner {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Preconditioner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preconditioner::Identity => "identity",
            Preconditioner::InvSqrtH => "inv_sqrt_H",
            Preconditioner::InvH => "inv_H",
        })
    }
}

/// How the Hessian spectrum is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum LambdaSpec {
    Constant(f64),
    /// `p` values spaced evenly in log between `min` and `max`, inclusive.
    LogUniform {
        min: f64,
        max: f64,
    },
    List(Vec<f64>),
}

impl LambdaSpec {
    pub fn build(&self, p: usize) -> Result<Vec<f64>> {
        match self {
            LambdaSpec::Constant(v) => Ok(vec![*v; p]),
            LambdaSpec::LogUniform { min, max } => {
                if !(*min > 0.0 && max >= min) {
                    return Err(GavgError::config("loguniform needs 0 < min <= max"));
                }
                if p == 1 {
                    return Ok(vec![*min]);
                }
                let (lo, hi) = (min.ln(), max.ln());
                Ok((0..p)
                    .map(|i| (lo + (hi - lo) * i as f64 / (p - 1) as f64).exp())
                    .collect())
            }
            LambdaSpec::List(v) => {
                if v.len() != p {
                    return Err(GavgError::config(format!(
                        "lambda list has {} entries but p = {p}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

impl FromStr for LambdaSpec {
    type Err = GavgError;

    /// `constant`, `constant:<v>`, `loguniform:<min>,<max>` or `list:<a>,<b>,...`
    /// (a bare comma list is also accepted).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || GavgError::config(format!("bad lambda spec {s:?}"));
        let nums = |body: &str| -> Result<Vec<f64>> {
            body.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                .collect()
        };
        if s == "constant" {
            return Ok(LambdaSpec::Constant(1.0));
        }
        if let Some(v) = s.strip_prefix("constant:") {
            return Ok(LambdaSpec::Constant(v.trim().parse().map_err(|_| bad())?));
        }
        if let Some(body) = s.strip_prefix("loguniform:") {
            let v = nums(body)?;
            if v.len() != 2 {
                return Err(bad());
            }
            return Ok(LambdaSpec::LogUniform {
                min: v[0],
                max: v[1],
            });
        }
        let body = s.strip_prefix("list:").unwrap_or(s);
        Ok(LambdaSpec::List(nums(body)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadModel {
    pub lambdas: Vec<f64>,
    pub sigma2: f64,
    pub batch: u32,
    pub precond: Preconditioner,
}

impl QuadModel {
    pub fn new(
        lambdas: Vec<f64>,
        sigma2: f64,
        batch: u32,
        precond: Preconditioner,
    ) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(GavgError::domain("quadratic needs at least one eigenvalue"));
        }
        if let Some(i) = lambdas.iter().position(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(GavgError::domain(format!(
                "lambda[{i}] = {} is not positive",
                lambdas[i]
            )));
        }
        if !(sigma2 >= 0.0) {
            return Err(GavgError::domain("sigma2 must be >= 0"));
        }
        if batch == 0 {
            return Err(GavgError::domain("batch must be >= 1"));
        }
        Ok(QuadModel {
            lambdas,
            sigma2,
            batch,
            precond,
        })
    }

    /// Isotropic model with identity preconditioner and unit batch.
    pub fn isotropic(p: usize, lambda: f64, noise_var: f64) -> Result<Self> {
        QuadModel::new(vec![lambda; p], noise_var, 1, Preconditioner::Identity)
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    /// Per-coordinate gradient noise variance `sigma2 / B`.
    pub fn noise_var(&self) -> f64 {
        self.sigma2 / self.batch as f64
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        0.5 * self
            .lambdas
            .iter()
            .zip(w)
            .map(|(l, x)| l * x * x)
            .sum::<f64>()
    }

    /// `<lambda^k>`, the normalised trace of `H^k`.
    pub fn spectral_average(&self, k: i32) -> f64 {
        self.lambdas.iter().map(|l| l.powi(k)).sum::<f64>() / self.dim() as f64
    }

    /// Per-coordinate contraction `1 - alpha * lambda_i * c_i`.
    pub fn contractions(&self, alpha: f64) -> Vec<f64> {
        self.lambdas
            .iter()
            .map(|l| 1.0 - alpha * l * self.precond.scale(*l))
            .collect()
    }

    /// Rejects step sizes with `alpha * lambda_i * c_i >= 2` for any i.
    pub fn check_stable(&self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(GavgError::domain(format!("alpha must be > 0, got {alpha}")));
        }
        let worst = self
            .lambdas
            .iter()
            .map(|l| alpha * l * self.precond.scale(*l))
            .fold(0.0, f64::max);
        if worst >= 2.0 {
            return Err(GavgError::Divergence(format!(
                "alpha * lambda * c = {worst} >= 2; the recursion diverges"
            )));
        }
        Ok(())
    }
}

/// Which trajectory summaries to accumulate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Collect {
    pub final_iterate: bool,
    pub ia: bool,
    pub ema: Option<f64>,
}

impl Default for Collect {
    fn default() -> Self {
        Collect {
            final_iterate: true,
            ia: true,
            ema: None,
        }
    }
}

impl Collect {
    pub fn all(rho: f64) -> Self {
        Collect {
            final_iterate: true,
            ia: true,
            ema: Some(rho),
        }
    }
}

impl FromStr for Collect {
    type Err = GavgError;

    /// Comma list of `final`, `ia`, `ema(<rho>)`.
    fn from_str(s: &str) -> Result<Self> {
        let mut c = Collect {
            final_iterate: false,
            ia: false,
            ema: None,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "final" {
                c.final_iterate = true;
            } else if part == "ia" {
                c.ia = true;
            } else if let Some(rho) = part.strip_prefix("ema(").and_then(|r| r.strip_suffix(')')) {
                let rho: f64 = rho
                    .parse()
                    .map_err(|_| GavgError::config(format!("bad ema rho in {part:?}")))?;
                c.ema = Some(rho);
            } else {
                return Err(GavgError::config(format!("unknown collect item {part:?}")));
            }
        }
        Ok(c)
    }
}

/// Per-seed results and cross-seed per-coordinate moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryStats {
    pub seeds: usize,
    pub steps: u64,
    pub final_norms: Vec<f64>,
    pub avg_norms: Vec<f64>,
    pub ema_norms: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub avg_losses: Vec<f64>,
    pub ema_losses: Vec<f64>,
    /// `(1/n) sum_t (L(w_t) - L*)` per seed.
    pub regret_mean: Vec<f64>,
    pub per_coord_mean_final: Vec<f64>,
    pub per_coord_var_final: Vec<f64>,
    pub per_coord_var: Vec<f64>,
    pub per_coord_var_ema: Vec<f64>,
}

#[derive(Default)]
struct SeedResult {
    final_w: Vec<f64>,
    avg_w: Vec<f64>,
    ema_w: Vec<f64>,
    regret: f64,
}

/// Monte Carlo settings for [`simulate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Simulation {
    pub alpha: f64,
    pub steps: u64,
    pub seeds: usize,
    pub collect: Collect,
    /// Seed `s` draws from `RngStream::new(base_seed, s)`.
    pub base_seed: u64,
    pub mode: Parallelism,
}

impl Simulation {
    pub fn new(alpha: f64, steps: u64, seeds: usize) -> Self {
        Simulation {
            alpha,
            steps,
            seeds,
            collect: Collect::default(),
            base_seed: 0,
            mode: Parallelism::Rayon,
        }
    }

    pub fn collect(mut self, collect: Collect) -> Self {
        self.collect = collect;
        self
    }

    pub fn base_seed(mut self, seed: u64) -> Self {
        self.base_seed = seed;
        self
    }

    pub fn mode(mut self, mode: Parallelism) -> Self {
        self.mode = mode;
        self
    }
}

/// Runs `steps` noisy iterations from `w0` for every seed.
pub fn simulate(model: &QuadModel, w0: &ParamVector, sim: &Simulation) -> Result<TrajectoryStats> {
    let Simulation {
        alpha,
        steps: n,
        seeds,
        collect,
        base_seed,
        mode,
    } = *sim;
    check_len(model.dim(), w0.len())?;
    model.check_stable(alpha)?;
    if n == 0 || seeds == 0 {
        return Err(GavgError::domain("simulate needs n >= 1 and seeds >= 1"));
    }
    if let Some(rho) = collect.ema {
        if !(0.0..1.0).contains(&rho) {
            return Err(GavgError::domain(format!("ema rho {rho} outside [0,1)")));
        }
    }

    let contraction = model.contractions(alpha);
    let noise_sd = model.noise_var().sqrt();
    let kick: Vec<f64> = model
        .lambdas
        .iter()
        .map(|l| alpha * model.precond.scale(*l) * noise_sd)
        .collect();

    let results = map_indexed(mode, seeds, |s| {
        let mut rng = RngStream::new(base_seed, s as u64);
        let mut w = w0.as_slice().to_vec();
        let mut sum = vec![0.0; w.len()];
        let mut ema = w.clone();
        let rho = collect.ema.unwrap_or(0.0);
        let mut regret = 0.0;
        for _ in 0..n {
            let mut loss = 0.0;
            for i in 0..w.len() {
                let xi = if noise_sd > 0.0 {
                    rng.standard_normal()
                } else {
                    0.0
                };
                let x = contraction[i] * w[i] - kick[i] * xi;
                w[i] = x;
                loss += model.lambdas[i] * x * x;
            }
            regret += 0.5 * loss;
            if collect.ia {
                sum.iter_mut().zip(&w).for_each(|(a, x)| *a += x);
            }
            if collect.ema.is_some() {
                ema.iter_mut()
                    .zip(&w)
                    .for_each(|(e, x)| *e = rho * *e + (1.0 - rho) * x);
            }
        }
        let inv_n = 1.0 / n as f64;
        SeedResult {
            avg_w: if collect.ia {
                sum.iter().map(|x| x * inv_n).collect()
            } else {
                Vec::new()
            },
            ema_w: if collect.ema.is_some() {
                ema
            } else {
                Vec::new()
            },
            final_w: w,
            regret: regret * inv_n,
        }
    });

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut stats = TrajectoryStats {
        seeds,
        steps: n,
        ..Default::default()
    };
    stats.regret_mean = results.iter().map(|r| r.regret).collect();
    for r in &results {
        if collect.final_iterate {
            stats.final_norms.push(norm(&r.final_w));
            stats.final_losses.push(model.loss(&r.final_w));
        }
        if collect.ia {
            stats.avg_norms.push(norm(&r.avg_w));
            stats.avg_losses.push(model.loss(&r.avg_w));
        }
        if collect.ema.is_some() {
            stats.ema_norms.push(norm(&r.ema_w));
            stats.ema_losses.push(model.loss(&r.ema_w));
        }
    }
    let moments = |pick: &dyn Fn(&SeedResult) -> &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        (0..model.dim())
            .map(|i| {
                let col: Vec<f64> = results.iter().map(|r| pick(r)[i]).collect();
                mean_var(&col)
            })
            .unzip()
    };
    if collect.final_iterate {
        let (m, v) = moments(&|r| &r.final_w);
        stats.per_coord_mean_final = m;
        stats.per_coord_var_final = v;
    }
    if collect.ia {
        stats.per_coord_var = moments(&|r| &r.avg_w).1;
    }
    if collect.ema.is_some() {
        stats.per_coord_var_ema = moments(&|r| &r.ema_w).1;
    }
    Ok(stats)
}

impl TrajectoryStats {
    /// CSV with columns `seed,final_norm,avg_norm,ema_norm,regret_mean`.
    /// Uncollected columns are left empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "seed,final_norm,avg_norm,ema_norm,regret_mean")?;
        let cell = |v: &Vec<f64>, i: usize| v.get(i).map(|x| format!("{x:?}")).unwrap_or_default();
        for s in 0..self.seeds {
            writeln!(
                out,
                "{s},{},{},{},{:?}",
                cell(&self.final_norms, s),
                cell(&self.avg_norms, s),
                cell(&self.ema_norms, s),
                self.regret_mean[s]
            )?;
        }
        Ok(())
    }
}

fn require_identity(model: &QuadModel) -> Result<()> {
    if model.precond != Preconditioner::Identity {
        return Err(GavgError::domain(
            "closed-form norm predictions assume the identity preconditioner",
        ));
    }
    Ok(())
}

/// Concentration center for `||w_n||`:
/// `sqrt(sum w0_i^2 e^{-2 n alpha lambda_i} + P (alpha s) <1/(lambda(2 - alpha lambda))>)`.
pub fn predict_final_norm(model: &QuadModel, w0: &ParamVector, alpha: f64, n: u64) -> Result<f64> {
    require_identity(model)?;
    check_len(model.dim(), w0.len())?;
    model.check_stable(alpha)?;
    let nf = n as f64;
    let mean_term: f64 = model
        .lambdas
        .iter()
        .zip(w0.iter())
        .map(|(l, w)| w * w * (-2.0 * nf * alpha * l).exp())
        .sum();
    let p = model.dim() as f64;
    let avg_inv: f64 = model
        .lambdas
        .iter()
        .map(|l| 1.0 / (l * (2.0 - alpha * l)))
        .sum::<f64>()
        / p;
    let noise_term = if n == 0 {
        0.0
    } else {
        p * alpha * model.noise_var() * avg_inv
    };
    Ok((mean_term + noise_term).sqrt())
}

/// Concentration center for `||w_avg||` (concentration form):
/// `sqrt(sum w0_i^2/(lambda_i^2 n^2 alpha^2) + (P alpha s / n) <1/lambda^2>)`.
pub fn predict_avg_norm(model: &QuadModel, w0: &ParamVector, alpha: f64, n: u64) -> Result<f64> {
    require_identity(model)?;
    check_len(model.dim(), w0.len())?;
    model.check_stable(alpha)?;
    if n == 0 {
        return Err(GavgError::domain("average over zero iterates"));
    }
    let nf = n as f64;
    let mean_term: f64 = model
        .lambdas
        .iter()
        .zip(w0.iter())
        .map(|(l, w)| w * w / (l * l * nf * nf * alpha * alpha))
        .sum();
    let p = model.dim() as f64;
    let noise_term = p * alpha * model.noise_var() / nf * model.spectral_average(-2);
    Ok((mean_term + noise_term).sqrt())
}

/// Exact per-coordinate moments of the AR(1) recursion after `n` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactMoments {
    pub mean_final: Vec<f64>,
    pub var_final: Vec<f64>,
    /// Mean and variance of `(1/n) sum_{t=1..n} w_t`.
    pub mean_avg: Vec<f64>,
    pub var_avg: Vec<f64>,
}

impl ExactMoments {
    pub fn expected_sq_norm_final(&self) -> f64 {
        self.mean_final
            .iter()
            .zip(&self.var_final)
            .map(|(m, v)| m * m + v)
            .sum()
    }

    pub fn expected_sq_norm_avg(&self) -> f64 {
        self.mean_avg
            .iter()
            .zip(&self.var_avg)
            .map(|(m, v)| m * m + v)
            .sum()
    }
}

/// Closed-form moments, valid for every preconditioner. With contraction
/// `a = 1 - alpha*lambda*c` and kick variance `q = (alpha c)^2 s`:
///
/// ```text
/// E w_n   = a^n w0                     Var w_n   = q (1 - a^{2n}) / (1 - a^2)
/// E w_avg = w0 a (1 - a^n) / (n(1-a))  Var w_avg = q / (n (1-a))^2 * sum_{k=1..n} (1 - a^k)^2
/// ```
///
/// For large `n` the average's variance tends to `s / (lambda^2 n)`, a
/// factor `1/alpha` above the concentration center used by
/// [`predict_avg_norm`].
pub fn exact_moments(
    model: &QuadModel,
    w0: &ParamVector,
    alpha: f64,
    n: u64,
) -> Result<ExactMoments> {
    check_len(model.dim(), w0.len())?;
    model.check_stable(alpha)?;
    if n == 0 {
        return Err(GavgError::domain("moments need n >= 1"));
    }
    let s = model.noise_var();
    let nf = n as f64;
    let mut out = ExactMoments {
        mean_final: Vec::with_capacity(model.dim()),
        var_final: Vec::with_capacity(model.dim()),
        mean_avg: Vec::with_capacity(model.dim()),
        var_avg: Vec::with_capacity(model.dim()),
    };
    for (i, l) in model.lambdas.iter().enumerate() {
        let c = model.precond.scale(*l);
        let a = 1.0 - alpha * l * c;
        let q = (alpha * c).powi(2) * s;
        let an = a.powf(nf);
        out.mean_final.push(an * w0[i]);
        out.var_final.push(if a * a == 1.0 {
            q * nf
        } else {
            q * (1.0 - an * an) / (1.0 - a * a)
        });
        let one_minus_a = 1.0 - a;
        // sum_{k=1..n} (1 - a^k)^2 = n - 2 a (1-a^n)/(1-a) + a^2 (1-a^{2n})/(1-a^2)
        let geo1 = a * (1.0 - an) / one_minus_a;
        let geo2 = if a * a == 1.0 {
            nf
        } else {
            a * a * (1.0 - an * an) / (1.0 - a * a)
        };
        let sum_sq = nf - 2.0 * geo1 + geo2;
        out.mean_avg.push(w0[i] * geo1 / nf);
        out.var_avg.push(q / (nf * one_minus_a).powi(2) * sum_sq);
    }
    Ok(out)
}

/// Stationary `Var(w_ema) / Var(w_t)` for an AR(1) stream with contraction
/// `a`: `(1-rho)/(1+rho) * (1 + a rho)/(1 - a rho)`. Reduces to the i.i.d.
/// factor `(1-rho)/(1+rho)` at `a = 0`.
pub fn ema_stationary_ratio(a: f64, rho: f64) -> f64 {
    (1.0 - rho) / (1.0 + rho) * (1.0 + a * rho) / (1.0 - a * rho)
}

/// Asymptotic law of the 1-D EMA point: mean `(1-rho) w0 a^{n+1} [1 - (rho/a)^{n-1}] / (a - rho)` and
/// variance `(1-rho)/(1+rho) * alpha s kappa / lambda`,
/// `kappa = 1 - a^{n-2}`, where `a = 1 - alpha lambda`.
pub fn predict_ema(model: &QuadModel, w0: f64, alpha: f64, n: u64, rho: f64) -> Result<(f64, f64)> {
    if model.dim() != 1 {
        return Err(GavgError::domain("predict_ema is defined for a 1-D model"));
    }
    require_identity(model)?;
    model.check_stable(alpha)?;
    if !(0.0..1.0).contains(&rho) {
        return Err(GavgError::domain(format!("rho {rho} outside [0,1)")));
    }
    if n < 2 {
        return Err(GavgError::domain("predict_ema needs n >= 2"));
    }
    let lambda = model.lambdas[0];
    let a = 1.0 - alpha * lambda;
    if (a - rho).abs() < 1e-9 {
        return Err(GavgError::domain("rho is at the pole 1 - alpha*lambda"));
    }
    let nf = n as f64;
    let mean = if rho == 0.0 {
        w0 * a.powf(nf)
    } else {
        (1.0 - rho) * w0 * a.powf(nf + 1.0) * (1.0 - (rho / a).powf(nf - 1.0)) / (a - rho)
    };
    let kappa = 1.0 - a.powf(nf - 2.0);
    let var = (1.0 - rho) / (1.0 + rho) * alpha * model.noise_var() * kappa / lambda;
    Ok((mean, var))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegretKind {
    /// Averaged iterate, `Tr(H^-1 Sigma) / (2n + 2)` for `B = I`.
    AvgTable,
    /// Averaged iterate with the looser `n + 1` denominator.
    AvgLoose,
    /// Last iterate.
    Final,
}

/// Asymptotic upper bound on `E L(w) - L*` with `Sigma_g = (sigma2/B) I`.
///
/// For `B = I`: average `Tr(H^-1 Sigma)/(2n+2)` (or `/(n+1)`), final
/// `(alpha/4) Tr((1 - alpha H / 2)^-1 Sigma)`. For diagonal `B != I`:
/// average `min(Tr(H^-1 Sigma)/(n+1), (alpha/2) Tr(B^-1 Sigma))`, final
/// `(alpha/4) Tr(B^-1 Sigma)`.
pub fn regret_bound(model: &QuadModel, alpha: f64, n: u64, kind: RegretKind) -> Result<f64> {
    let s = model.noise_var();
    let nf = n as f64;
    let tr_hinv: f64 = model.lambdas.iter().map(|l| s / l).sum();
    let denom = match kind {
        RegretKind::AvgTable => 2.0 * nf + 2.0,
        _ => nf + 1.0,
    };
    if model.precond == Preconditioner::Identity {
        match kind {
            RegretKind::AvgTable | RegretKind::AvgLoose => Ok(tr_hinv / denom),
            RegretKind::Final => {
                let mut total = 0.0;
                for l in &model.lambdas {
                    let d = 1.0 - 0.5 * alpha * l;
                    if d <= 0.0 {
                        return Err(GavgError::domain("1 - alpha*lambda/2 <= 0"));
                    }
                    total += s / d;
                }
                Ok(0.25 * alpha * total)
            }
        }
    } else {
        let tr_binv: f64 = model
            .lambdas
            .iter()
            .map(|l| model.precond.scale(*l) * s)
            .sum();
        match kind {
            RegretKind::AvgTable | RegretKind::AvgLoose => {
                Ok((tr_hinv / denom).min(0.5 * alpha * tr_binv))
            }
            RegretKind::Final => Ok(0.25 * alpha * tr_binv),
        }
    }
}
