use serde::{Deserialize, Serialize};

use crate::error::{check_len, GavgError, Result};
use crate::numerics::{log_sum_exp, softmax_into, ParamVector, ProbVector, RngStream};

use super::data::DataBatch;

/// Version tag of the parameter layout below, stored in checkpoints.
pub const LAYOUT_VERSION: u32 = 1;

/// Fully connected ReLU network. No hidden layers gives multinomial
/// logistic regression.
///
/// Flattened layout, layer by layer from the input: the weight matrix
/// (`fan_out x fan_in`, row-major), then the bias when the layer has no
/// batch norm, otherwise the BN scale then shift. The output layer never
/// has batch norm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub batch_norm: bool,
}

impl Architecture {
    pub fn logistic(input: usize, classes: usize) -> Self {
        Architecture {
            input,
            hidden: Vec::new(),
            classes,
            batch_norm: false,
        }
    }

    pub fn mlp(input: usize, hidden: &[usize], classes: usize, batch_norm: bool) -> Self {
        Architecture {
            input,
            hidden: hidden.to_vec(),
            classes,
            batch_norm,
        }
    }

    /// Logistic regression with a nonnegative L2 term is convex in the weights.
    pub fn is_convex(&self) -> bool {
        self.hidden.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    #[serde(default = "default_bn_eps")]
    pub eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub momentum: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: default_bn_eps(),
            momentum: default_bn_momentum(),
        }
    }
}

/// Per-unit mean and (biased) variance of one BN layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn identity(units: usize) -> Self {
        BnStats {
            mean: vec![0.0; units],
            var: vec![1.0; units],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: ParamVector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    bias: Option<usize>,
    /// Offsets of scale and shift, plus the BN layer index.
    bn: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub arch: Architecture,
    layers: Vec<Layer>,
    pub theta: ParamVector,
    pub bn_running: Vec<BnStats>,
    pub mode: Mode,
    pub bn: BnConfig,
}

struct HiddenCache {
    zhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Post-activation mask (`y > 0`).
    active: Vec<bool>,
}

struct Pass {
    /// `acts[l]` is the input of layer `l`; `acts[0]` is the batch.
    acts: Vec<Vec<f64>>,
    hidden: Vec<HiddenCache>,
    logits: Vec<f64>,
    batch_stats: Vec<BnStats>,
}

impl TaskModel {
    /// Zero-parameter model in train mode with identity running stats.
    pub fn zeros(arch: Architecture, bn: BnConfig) -> Result<Self> {
        if arch.input == 0 || arch.classes < 2 || arch.hidden.contains(&0) {
            return Err(GavgError::config(format!(
                "degenerate architecture {arch:?}"
            )));
        }
        let mut sizes = vec![arch.input];
        sizes.extend(&arch.hidden);
        sizes.push(arch.classes);
        let mut layers = Vec::new();
        let mut off = 0;
        let mut bn_count = 0;
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w = off;
            off += fan_in * fan_out;
            let is_hidden = l + 1 < sizes.len() - 1;
            let (bias, bn_offs) = if is_hidden && arch.batch_norm {
                let g = off;
                off += 2 * fan_out;
                bn_count += 1;
                (None, Some((g, g + fan_out, bn_count - 1)))
            } else {
                let b = off;
                off += fan_out;
                (Some(b), None)
            };
            layers.push(Layer {
                fan_in,
                fan_out,
                w,
                bias,
                bn: bn_offs,
            });
        }
        let mut theta = ParamVector::zeros(off);
        let mut bn_running = Vec::new();
        for layer in &layers {
            if let Some((g, _, _)) = layer.bn {
                theta.as_mut_slice()[g..g + layer.fan_out].fill(1.0);
                bn_running.push(BnStats::identity(layer.fan_out));
            }
        }
        Ok(TaskModel {
            arch,
            layers,
            theta,
            bn_running,
            mode: Mode::Train,
            bn,
        })
    }

    /// He-normal hidden weights, `N(0, 1/fan_in)` output weights (or zeros
    /// when `zero_final`), zero biases, unit BN scale.
    pub fn init(
        arch: Architecture,
        bn: BnConfig,
        rng: &mut RngStream,
        zero_final: bool,
    ) -> Result<Self> {
        let mut model = TaskModel::zeros(arch, bn)?;
        let last = model.layers.len() - 1;
        for (l, layer) in model.layers.iter().enumerate() {
            if l == last && zero_final {
                continue;
            }
            let gain = if l == last { 1.0 } else { 2.0 };
            let sd = (gain / layer.fan_in as f64).sqrt();
            let block =
                &mut model.theta.as_mut_slice()[layer.w..layer.w + layer.fan_in * layer.fan_out];
            for w in block {
                *w = sd * rng.standard_normal();
            }
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn bn_layer_count(&self) -> usize {
        self.bn_running.len()
    }

    /// Offset ranges of the weight matrices that feed a BN layer.
    pub fn bn_weight_blocks(&self) -> Vec<std::ops::Range<usize>> {
        self.layers
            .iter()
            .filter(|l| l.bn.is_some())
            .map(|l| l.w..l.w + l.fan_in * l.fan_out)
            .collect()
    }

    /// Offset range of the first layer's weights and bias (if any).
    pub fn first_block(&self) -> std::ops::Range<usize> {
        let l = &self.layers[0];
        let end = l
            .bias
            .map(|b| b + l.fan_out)
            .unwrap_or(l.w + l.fan_in * l.fan_out);
        l.w..end
    }

    fn forward(&self, theta: &[f64], batch: &DataBatch, mode: Mode) -> Result<Pass> {
        check_len(self.arch.input, batch.dim)?;
        batch.check_labels(self.arch.classes)?;
        let n = batch.len();
        if n == 0 {
            return Err(GavgError::domain("empty batch"));
        }
        if mode == Mode::Train && self.bn_layer_count() > 0 && n < 2 {
            return Err(GavgError::domain(
                "train-mode batch norm needs at least two examples",
            ));
        }
        let mut acts = vec![batch.inputs.clone()];
        let mut hidden = Vec::new();
        let mut batch_stats = Vec::new();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let a = acts.last().expect("input present");
            let w = &theta[layer.w..layer.w + fi * fo];
            let mut z = vec![0.0; n * fo];
            for s in 0..n {
                let row = &a[s * fi..(s + 1) * fi];
                for o in 0..fo {
                    let wr = &w[o * fi..(o + 1) * fi];
                    z[s * fo + o] = wr.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            if let Some(b) = layer.bias {
                let bias = &theta[b..b + fo];
                for s in 0..n {
                    z[s * fo..(s + 1) * fo]
                        .iter_mut()
                        .zip(bias)
                        .for_each(|(v, bb)| *v += bb);
                }
            }
            if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                return Err(GavgError::numeric(
                    li,
                    format!("pre-activations of layer {li} (entry {i})"),
                ));
            }
            if li == last {
                return Ok(Pass {
                    acts,
                    hidden,
                    logits: z,
                    batch_stats,
                });
            }
            let mut zhat = z;
            let mut inv_std = vec![1.0; fo];
            if let Some((g, bt, k)) = layer.bn {
                let stats = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; fo];
                        let mut var = vec![0.0; fo];
                        for s in 0..n {
                            for o in 0..fo {
                                mean[o] += zhat[s * fo + o];
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        for s in 0..n {
                            for o in 0..fo {
                                var[o] += (zhat[s * fo + o] - mean[o]).powi(2);
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= n as f64);
                        BnStats { mean, var }
                    }
                    Mode::Eval => self.bn_running[k].clone(),
                };
                for o in 0..fo {
                    inv_std[o] = 1.0 / (stats.var[o] + self.bn.eps).sqrt();
                }
                let (gamma, beta) = (&theta[g..g + fo], &theta[bt..bt + fo]);
                let mut y = vec![0.0; n * fo];
                for s in 0..n {
                    for o in 0..fo {
                        let h = (zhat[s * fo + o] - stats.mean[o]) * inv_std[o];
                        zhat[s * fo + o] = h;
                        y[s * fo + o] = gamma[o] * h + beta[o];
                    }
                }
                batch_stats.push(stats);
                let active: Vec<bool> = y.iter().map(|v| *v > 0.0).collect();
                let out: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
                hidden.push(HiddenCache {
                    zhat,
                    inv_std,
                    active,
                });
                acts.push(out);
            } else {
                let active: Vec<bool> = zhat.iter().map(|v| *v > 0.0).collect();
                let out: Vec<f64> = zhat.iter().map(|v| v.max(0.0)).collect();
                hidden.push(HiddenCache {
                    zhat: Vec::new(),
                    inv_std,
                    active,
                });
                acts.push(out);
            }
        }
        unreachable!("output layer returns")
    }

    fn loss_and_grad_at(
        &self,
        theta: &[f64],
        batch: &DataBatch,
        l2: f64,
        mode: Mode,
    ) -> Result<(LossGrad, Vec<BnStats>)> {
        let pass = self.forward(theta, batch, mode)?;
        let n = batch.len();
        let c = self.arch.classes;
        let inv_n = 1.0 / n as f64;

        let mut loss = 0.0;
        let mut delta = vec![0.0; n * c];
        for s in 0..n {
            let z = &pass.logits[s * c..(s + 1) * c];
            let y = batch.labels[s];
            loss += log_sum_exp(z) - z[y];
            let d = &mut delta[s * c..(s + 1) * c];
            softmax_into(z, d);
            d[y] -= 1.0;
            d.iter_mut().for_each(|v| *v *= inv_n);
        }
        loss *= inv_n;

        let mut grad = vec![0.0; theta.len()];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            // `delta` holds dL/d(pre-activation) of this layer, shape n x fo.
            if li + 1 < self.layers.len() {
                let cache = &pass.hidden[li];
                // delta currently dL/d(output activation); apply ReLU.
                for (d, on) in delta.iter_mut().zip(&cache.active) {
                    if !on {
                        *d = 0.0;
                    }
                }
                if let Some((g, bt, _)) = layer.bn {
                    let gamma = &theta[g..g + fo];
                    let mut dgamma = vec![0.0; fo];
                    let mut dbeta = vec![0.0; fo];
                    for s in 0..n {
                        for o in 0..fo {
                            let dy = delta[s * fo + o];
                            dgamma[o] += dy * cache.zhat[s * fo + o];
                            dbeta[o] += dy;
                        }
                    }
                    grad[g..g + fo].copy_from_slice(&dgamma);
                    grad[bt..bt + fo].copy_from_slice(&dbeta);
                    match mode {
                        Mode::Train => {
                            // dz = inv_std/n * (n dh - sum dh - h * sum(dh h)), dh = gamma dy
                            let nf = n as f64;
                            for o in 0..fo {
                                let sum_dh = gamma[o] * dbeta[o];
                                let sum_dh_h = gamma[o] * dgamma[o];
                                for s in 0..n {
                                    let dh = gamma[o] * delta[s * fo + o];
                                    let h = cache.zhat[s * fo + o];
                                    delta[s * fo + o] =
                                        cache.inv_std[o] / nf * (nf * dh - sum_dh - h * sum_dh_h);
                                }
                            }
                        }
                        Mode::Eval => {
                            for s in 0..n {
                                for o in 0..fo {
                                    delta[s * fo + o] *= gamma[o] * cache.inv_std[o];
                                }
                            }
                        }
                    }
                }
            }
            let a = &pass.acts[li];
            let gw = &mut grad[layer.w..layer.w + fi * fo];
            for s in 0..n {
                let row = &a[s * fi..(s + 1) * fi];
                for o in 0..fo {
                    let d = delta[s * fo + o];
                    if d != 0.0 {
                        gw[o * fi..(o + 1) * fi]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(g, x)| *g += d * x);
                    }
                }
            }
            if let Some(b) = layer.bias {
                for s in 0..n {
                    for o in 0..fo {
                        grad[b + o] += delta[s * fo + o];
                    }
                }
            }
            if li > 0 {
                let w = &theta[layer.w..layer.w + fi * fo];
                let mut prev = vec![0.0; n * fi];
                for s in 0..n {
                    let pr = &mut prev[s * fi..(s + 1) * fi];
                    for o in 0..fo {
                        let d = delta[s * fo + o];
                        if d != 0.0 {
                            pr.iter_mut()
                                .zip(&w[o * fi..(o + 1) * fi])
                                .for_each(|(p, wv)| *p += d * wv);
                        }
                    }
                }
                delta = prev;
            }
        }

        if l2 > 0.0 {
            let sq: f64 = theta.iter().map(|x| x * x).sum();
            loss += 0.5 * l2 * sq;
            grad.iter_mut().zip(theta).for_each(|(g, t)| *g += l2 * t);
        }
        if !loss.is_finite() {
            return Err(GavgError::numeric(self.layers.len() - 1, "loss"));
        }
        let grad = ParamVector::new(grad);
        grad.ensure_finite("gradient")?;
        Ok((LossGrad { loss, grad }, pass.batch_stats))
    }

    /// Mean softmax cross-entropy plus `(l2/2)||theta||^2` and its gradient,
    /// at the model's own parameters and mode. Running stats are untouched.
    pub fn loss_and_grad(&self, batch: &DataBatch, l2: f64) -> Result<LossGrad> {
        self.loss_and_grad_at(self.theta.as_slice(), batch, l2, self.mode)
            .map(|r| r.0)
    }

    /// Same as [`loss_and_grad`](Self::loss_and_grad) at an arbitrary point.
    pub fn loss_and_grad_with(
        &self,
        theta: &ParamVector,
        batch: &DataBatch,
        l2: f64,
    ) -> Result<LossGrad> {
        check_len(self.num_params(), theta.len())?;
        self.loss_and_grad_at(theta.as_slice(), batch, l2, self.mode)
            .map(|r| r.0)
    }

    /// Train-mode loss and gradient that also folds the batch statistics
    /// into the running estimates.
    pub fn train_step_grad(&mut self, batch: &DataBatch, l2: f64) -> Result<LossGrad> {
        let (lg, stats) = self.loss_and_grad_at(self.theta.as_slice(), batch, l2, Mode::Train)?;
        let m = self.bn.momentum;
        for (run, b) in self.bn_running.iter_mut().zip(stats) {
            for o in 0..run.mean.len() {
                run.mean[o] = (1.0 - m) * run.mean[o] + m * b.mean[o];
                run.var[o] = (1.0 - m) * run.var[o] + m * b.var[o];
            }
        }
        Ok(lg)
    }

    /// Logits under `mode`.
    pub fn logits(&self, batch: &DataBatch, mode: Mode) -> Result<Vec<f64>> {
        Ok(self.forward(self.theta.as_slice(), batch, mode)?.logits)
    }

    /// Eval-mode class probabilities, one row per example.
    pub fn predict_proba(&self, batch: &DataBatch) -> Result<Vec<ProbVector>> {
        let c = self.arch.classes;
        let logits = self.logits(batch, Mode::Eval)?;
        logits
            .chunks(c)
            .map(|z| {
                let mut p = vec![0.0; c];
                softmax_into(z, &mut p);
                ProbVector::new(p)
            })
            .collect()
    }

    /// Eval-mode mean cross-entropy (no regulariser) and accuracy.
    pub fn evaluate(&self, batch: &DataBatch) -> Result<EvalResult> {
        let c = self.arch.classes;
        let logits = self.logits(batch, Mode::Eval)?;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (z, &y) in logits.chunks(c).zip(&batch.labels) {
            loss += log_sum_exp(z) - z[y];
            let arg = z
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > z[best] { i } else { best });
            if arg == y {
                correct += 1;
            }
        }
        let n = batch.len() as f64;
        Ok(EvalResult {
            loss: loss / n,
            accuracy: correct as f64 / n,
        })
    }

    /// Exact population statistics of every BN layer's input over `data`,
    /// normalising each batch with its own statistics on the way through.
    pub fn population_bn_stats(&self, data: &[DataBatch]) -> Result<Vec<BnStats>> {
        let k = self.bn_layer_count();
        let mut count = 0.0;
        let mut acc: Vec<BnStats> = self
            .layers
            .iter()
            .filter(|l| l.bn.is_some())
            .map(|l| BnStats {
                mean: vec![0.0; l.fan_out],
                var: vec![0.0; l.fan_out],
            })
            .collect();
        for batch in data.iter().filter(|b| !b.is_empty()) {
            let pass = self.forward(self.theta.as_slice(), batch, Mode::Train)?;
            let nb = batch.len() as f64;
            let total = count + nb;
            // Chan et al. pairwise merge of (mean, M2); `var` holds M2 until the end.
            for (a, b) in acc.iter_mut().zip(&pass.batch_stats).take(k) {
                for o in 0..a.mean.len() {
                    let delta = b.mean[o] - a.mean[o];
                    a.mean[o] += delta * nb / total;
                    a.var[o] += b.var[o] * nb + delta * delta * count * nb / total;
                }
            }
            count = total;
        }
        if count == 0.0 {
            return Err(GavgError::domain("no examples in the data stream"));
        }
        for a in &mut acc {
            a.var.iter_mut().for_each(|m2| *m2 /= count);
        }
        Ok(acc)
    }

    /// `alpha / ||W||^2` for every weight block that feeds a BN layer.
    pub fn effective_lr(&self, alpha: f64) -> Result<Vec<f64>> {
        let blocks = self.bn_weight_blocks();
        if blocks.is_empty() {
            return Err(GavgError::domain("model has no batch-norm weight blocks"));
        }
        blocks
            .into_iter()
            .map(|r| {
                let sq: f64 = self.theta.as_slice()[r].iter().map(|x| x * x).sum();
                if sq == 0.0 {
                    Err(GavgError::domain("zero-norm weight block"))
                } else {
                    Ok(alpha / sq)
                }
            })
            .collect()
    }

    /// Scales the first layer's parameter block by `c` and returns the
    /// largest absolute change in train-mode logits on `batch`.
    pub fn bn_scale_invariance_check(&self, batch: &DataBatch, c: f64) -> Result<f64> {
        if self.bn_layer_count() == 0 {
            return Err(GavgError::domain(
                "scale invariance needs a batch-norm layer after the scaled block",
            ));
        }
        self.scaled_output_deviation(batch, c)
    }

    /// Output change under scaling of the first layer's parameters, usable
    /// on models without BN as a negative control.
    pub fn scaled_output_deviation(&self, batch: &DataBatch, c: f64) -> Result<f64> {
        if !(c > 0.0) {
            return Err(GavgError::domain("scale must be > 0"));
        }
        let base = self.logits(batch, Mode::Train)?;
        let mut scaled = self.clone();
        scaled.theta.as_mut_slice()[self.first_block()]
            .iter_mut()
            .for_each(|w| *w *= c);
        let other = scaled.logits(batch, Mode::Train)?;
        Ok(base
            .iter()
            .zip(&other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
