use serde::Serialize;

use crate::error::{check_len, GavgError, Result};
use crate::numerics::{ParamVector, RngStream};
use crate::parallel::{map_indexed, Parallelism};
use crate::tasks::{DataBatch, TaskModel};

/// Anything with an analytic gradient.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector>;
}

/// `L = theta^T H theta / 2` with a dense symmetric `H` (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub dim: usize,
    pub h: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(dim: usize, h: Vec<f64>) -> Result<Self> {
        check_len(dim * dim, h.len())?;
        Ok(QuadraticObjective { dim, h })
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut h = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            h[i * n + i] = *v;
        }
        QuadraticObjective { dim: n, h }
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        check_len(self.dim, theta.len())?;
        let n = self.dim;
        let g = (0..n)
            .map(|i| {
                self.h[i * n..(i + 1) * n]
                    .iter()
                    .zip(theta.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(ParamVector::new(g))
    }
}

/// Training objective of a task model on a fixed batch, in the model's
/// current mode.
pub struct TaskObjective<'a> {
    pub model: &'a TaskModel,
    pub batch: &'a DataBatch,
    pub l2: f64,
}

impl Objective for TaskObjective<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        Ok(self
            .model
            .loss_and_grad_with(theta, self.batch, self.l2)?
            .grad)
    }
}

/// `(grad(theta + h v) - grad(theta - h v)) / 2h`. `h` defaults to
/// `1e-4 * (1 + ||theta||)`.
pub fn hessian_vector_product<O: Objective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    v: &ParamVector,
    h: Option<f64>,
) -> Result<ParamVector> {
    check_len(obj.dim(), theta.len())?;
    check_len(obj.dim(), v.len())?;
    if v.iter().all(|x| *x == 0.0) {
        return Err(GavgError::domain("HVP direction must be nonzero"));
    }
    let h = h.unwrap_or(1e-4 * (1.0 + theta.norm()));
    if !(h > 0.0 && h.is_finite()) {
        return Err(GavgError::domain("HVP step must be > 0"));
    }
    let mut plus = theta.clone();
    plus.add_scaled(h, v)?;
    let mut minus = theta.clone();
    minus.add_scaled(-h, v)?;
    let gp = obj.gradient(&plus)?;
    let gm = obj.gradient(&minus)?;
    let mut out = gp.sub(&gm)?;
    out.scale(0.5 / h);
    if let Some(i) = out.first_non_finite() {
        return Err(GavgError::numeric(i, "Hessian-vector product"));
    }
    Ok(out)
}

fn unit_gaussian(rng: &mut RngStream, n: usize) -> ParamVector {
    let mut v = ParamVector::new((0..n).map(|_| rng.standard_normal()).collect());
    let norm = v.norm();
    v.scale(1.0 / norm);
    v
}

const MAX_RESTARTS: usize = 3;

/// Dominant `|eigenvalue|` by power iteration, reported as the absolute
/// Rayleigh quotient of the final unit iterate.
pub fn spectral_norm<O: Objective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    iters: usize,
    rng: &mut RngStream,
    h: Option<f64>,
) -> Result<f64> {
    if iters == 0 {
        return Err(GavgError::domain("power iteration needs iters >= 1"));
    }
    let n = obj.dim();
    'restart: for _ in 0..=MAX_RESTARTS {
        let mut v = unit_gaussian(rng, n);
        let mut estimate = 0.0;
        for _ in 0..iters {
            let w = hessian_vector_product(obj, theta, &v, h)?;
            let norm = w.norm();
            if norm == 0.0 {
                continue 'restart;
            }
            estimate = v.dot(&w)?.abs();
            v = w;
            v.scale(1.0 / norm);
        }
        return Ok(estimate);
    }
    Err(GavgError::Numeric {
        index: 0,
        context: format!("power iteration broke down after {MAX_RESTARTS} restarts"),
    })
}

/// Per-probe values with probe `k` drawn from substream `k` of `rng`'s seed,
/// summed in probe order.
fn probe_mean<O, F>(obj: &O, rng: &RngStream, probes: usize, mode: Parallelism, f: F) -> Result<f64>
where
    O: Objective + ?Sized,
    F: Fn(&mut RngStream, usize) -> Result<f64> + Sync + Send,
{
    if probes == 0 {
        return Err(GavgError::domain("need probes >= 1"));
    }
    let base = rng.stream_id();
    let values = map_indexed(mode, probes, |k| {
        let mut r = rng.substream(base.wrapping_add(1 + k as u64));
        f(&mut r, obj.dim())
    });
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / probes as f64)
}

/// Hutchinson estimate of `Tr H` with Rademacher probes.
pub fn trace_estimate<O: Objective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    probes: usize,
    rng: &RngStream,
    h: Option<f64>,
    mode: Parallelism,
) -> Result<f64> {
    probe_mean(obj, rng, probes, mode, |r, n| {
        let z = ParamVector::new((0..n).map(|_| r.rademacher()).collect());
        z.dot(&hessian_vector_product(obj, theta, &z, h)?)
    })
}

/// `sqrt(mean ||H z||^2)` over standard Gaussian probes.
pub fn frobenius_estimate<O: Objective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    probes: usize,
    rng: &RngStream,
    h: Option<f64>,
    mode: Parallelism,
) -> Result<f64> {
    let ms = probe_mean(obj, rng, probes, mode, |r, n| {
        let z = ParamVector::new((0..n).map(|_| r.standard_normal()).collect());
        Ok(hessian_vector_product(obj, theta, &z, h)?.norm_sq())
    })?;
    Ok(ms.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SharpnessReport {
    pub spectral_norm: f64,
    pub trace: f64,
    pub frobenius: f64,
    pub probes: usize,
    pub power_iters: usize,
}

/// All three estimates. The power iteration uses stream 0 of `seed`, the
/// trace probes streams `1..=probes` of stream base 0, and the Frobenius
/// probes the same layout under stream base `1 << 32`.
pub fn sharpness_report<O: Objective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    probes: usize,
    power_iters: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<SharpnessReport> {
    let mut power_rng = RngStream::new(seed, 0);
    let spectral = spectral_norm(obj, theta, power_iters, &mut power_rng, None)?;
    let trace = trace_estimate(obj, theta, probes, &RngStream::new(seed, 0), None, mode)?;
    let frobenius = frobenius_estimate(
        obj,
        theta,
        probes,
        &RngStream::new(seed, 1 << 32),
        None,
        mode,
    )?;
    Ok(SharpnessReport {
        spectral_norm: spectral,
        trace,
        frobenius,
        probes,
        power_iters,
    })
}
