//! Acceptance gate. Each criterion prints one `[acceptance]` line to stderr
//! (visible without `--nocapture`) before asserting.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use gavg_core::harness::{
    checkpoint_name, records_csv, reference_loss, regret_audit, run, run_seed, seed_dir,
    Checkpoint, RunConfig, RunOutcome,
};
use gavg_core::metrics::{
    frobenius_estimate, hessian_vector_product, pairwise_diversity, spectral_norm, trace_estimate,
    DiversityMetric, Objective, TaskObjective,
};
use gavg_core::noisy_quadratic::{
    ema_stationary_ratio, exact_moments, regret_bound, simulate, Collect, LambdaSpec,
    Preconditioner, QuadModel, RegretKind, Simulation,
};
use gavg_core::numerics::mean_var;
use gavg_core::optimizers::{
    EpsPlacement, HyperOverrides, Optimizer, OptimizerConfig, Preset, SgdHyper, SgdState,
};
use gavg_core::tasks::{make_blobs, Architecture, BnConfig, DataBatch, Mode, TaskModel};
use gavg_core::{Parallelism, ParamVector, RngStream};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] C{id:02} {name}: {verdict} ({detail})"
    );
}

fn mode() -> Parallelism {
    Parallelism::default()
}

// ---------------------------------------------------------------- quadratic

#[test]
fn c01_final_iterate_noise_term() {
    let (p, lambda, alpha, s, n, seeds) = (500, 1.0, 0.5, 0.01, 5000u64, 1000);
    let start = Instant::now();
    let model = QuadModel::isotropic(p, lambda, s).unwrap();
    let sim = Simulation::new(alpha, n, seeds)
        .collect(Collect {
            final_iterate: true,
            ia: false,
            ema: None,
        })
        .mode(mode());
    let st = simulate(&model, &ParamVector::zeros(p), &sim).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let empirical = st.final_norms.iter().sum::<f64>() / seeds as f64;

    // Stationary AR(1) oracle: w <- (1 - alpha lambda) w + alpha xi, xi ~ N(0, s).
    let a: f64 = 1.0 - alpha * lambda;
    let stationary_var = alpha * alpha * s / (1.0 - a * a);
    let oracle = (p as f64 * stationary_var).sqrt();
    let rel = (empirical - oracle).abs() / oracle;
    let pass = rel <= 0.05 && secs < 30.0;
    report(
        1,
        "final-iterate noise term",
        pass,
        &format!(
            "mean ||w_n|| = {empirical:.5}, oracle {oracle:.5}, rel err {:.3}%, {secs:.1} s",
            100.0 * rel
        ),
    );
    assert!(pass);
}

#[test]
fn c02_iterate_average_one_over_n() {
    let (p, lambda, alpha, s, seeds) = (500, 1.0, 0.5, 0.01, 200);
    let start = Instant::now();
    let model = QuadModel::isotropic(p, lambda, s).unwrap();
    let w0 = ParamVector::zeros(p);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut worst: f64 = 0.0;
    let mut vs_concentration = Vec::new();
    for (k, n) in [100u64, 1_000, 10_000].into_iter().enumerate() {
        let sim = Simulation::new(alpha, n, seeds)
            .collect(Collect {
                final_iterate: false,
                ia: true,
                ema: None,
            })
            .base_seed(10 + k as u64)
            .mode(mode());
        let st = simulate(&model, &w0, &sim).unwrap();
        let empirical = st.per_coord_var.iter().sum::<f64>() / p as f64;
        // Independent closed form for the mean of n AR(1) iterates started at 0:
        // w_avg = (1/n) sum_j alpha xi_j (1 - a^{n-j+1}) / (1 - a).
        let a: f64 = 1.0 - alpha * lambda;
        let oracle: f64 = (1..=n)
            .map(|k| (alpha * (1.0 - a.powi(k as i32)) / (1.0 - a)).powi(2))
            .sum::<f64>()
            * s
            / (n * n) as f64;
        let lib = exact_moments(&model, &w0, alpha, n).unwrap().var_avg[0];
        assert!(
            (lib - oracle).abs() / oracle < 1e-10,
            "library closed form disagrees with oracle"
        );
        let rel = (empirical - oracle).abs() / oracle;
        worst = worst.max(rel);
        let concentration_term = alpha * s / (n as f64 * lambda * lambda);
        vs_concentration.push(empirical / concentration_term);
        xs.push((n as f64).ln());
        ys.push(empirical.ln());
    }
    let (mx, _) = mean_var(&xs);
    let (my, _) = mean_var(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let secs = start.elapsed().as_secs_f64();
    let pass = (slope + 1.0).abs() <= 0.05 && worst <= 0.10 && secs < 120.0;
    report(
        2,
        "iterate-average 1/n law",
        pass,
        &format!(
            "slope {slope:.4}, worst rel err vs closed form {:.2}%, empirical/concentration-term ratios {:.3?} (1/alpha = {}), {secs:.1} s",
            100.0 * worst,
            vs_concentration,
            1.0 / alpha
        ),
    );
    assert!(pass);
}

#[test]
fn c03_ema_variance_factor() {
    // alpha*lambda = 1 makes successive iterates independent, so the
    // stationary EMA variance ratio is exactly (1 - rho)/(1 + rho).
    let (p, s, steps, seeds) = (100, 0.01, 2000u64, 200);
    let start = Instant::now();
    let model = QuadModel::isotropic(p, 1.0, s).unwrap();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (k, rho) in [0.5, 0.9, 0.99].into_iter().enumerate() {
        let sim = Simulation::new(1.0, steps, seeds)
            .collect(Collect {
                final_iterate: true,
                ia: false,
                ema: Some(rho),
            })
            .base_seed(20 + k as u64)
            .mode(mode());
        let st = simulate(&model, &ParamVector::zeros(p), &sim).unwrap();
        let ratio =
            st.per_coord_var_ema.iter().sum::<f64>() / st.per_coord_var_final.iter().sum::<f64>();
        let target = (1.0 - rho) / (1.0 + rho);
        let rel = (ratio - target).abs() / target;
        worst = worst.max(rel);
        detail.push(format!("rho {rho}: {ratio:.5} vs {target:.5}"));
    }
    // Informational: correlated iterates (alpha = 0.5) against the AR(1) generalisation.
    let sim = Simulation::new(0.5, steps, seeds)
        .collect(Collect::all(0.9))
        .base_seed(29)
        .mode(mode());
    let st = simulate(&model, &ParamVector::zeros(p), &sim).unwrap();
    let ar1 = st.per_coord_var_ema.iter().sum::<f64>() / st.per_coord_var_final.iter().sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 0.10 && secs < 60.0;
    report(
        3,
        "EMA variance factor",
        pass,
        &format!(
            "{}; worst rel err {:.2}%; AR(1) a=0.5 rho=0.9: {ar1:.4} vs {:.4}; {secs:.1} s",
            detail.join(", "),
            100.0 * worst,
            ema_stationary_ratio(0.5, 0.9)
        ),
    );
    assert!(pass);
}

#[test]
fn c04_regret_table_audit() {
    let (p, seeds) = (100, 400);
    let mut fails = Vec::new();
    let mut cells = 0;
    let mut max_avg_ratio: f64 = 0.0;
    let mut max_final_z = f64::NEG_INFINITY;
    for alpha in [0.05, 0.2] {
        for lambda in [0.1, 1.0] {
            for s in [0.01, 0.1] {
                for n in [100u64, 1000] {
                    let model = QuadModel::isotropic(p, lambda, s).unwrap();
                    let sim = Simulation::new(alpha, n, seeds)
                        .collect(Collect {
                            final_iterate: true,
                            ia: true,
                            ema: None,
                        })
                        .base_seed(40 + cells as u64)
                        .mode(mode());
                    cells += 1;
                    let st = simulate(&model, &ParamVector::zeros(p), &sim).unwrap();
                    // L* = 0 at w* = 0.
                    let (avg_mean, avg_var) = mean_var(&st.avg_losses);
                    let (fin_mean, fin_var) = mean_var(&st.final_losses);
                    let avg_se = (avg_var / seeds as f64).sqrt();
                    let fin_se = (fin_var / seeds as f64).sqrt();
                    let avg_bound = regret_bound(&model, alpha, n, RegretKind::AvgLoose).unwrap();
                    let fin_bound = regret_bound(&model, alpha, n, RegretKind::Final).unwrap();
                    // Independent bound values for the isotropic case.
                    let avg_oracle = p as f64 * s / lambda / (n as f64 + 1.0);
                    let fin_oracle = alpha / 4.0 * p as f64 * s / (1.0 - alpha * lambda / 2.0);
                    assert!((avg_bound - avg_oracle).abs() <= 1e-12 * avg_oracle);
                    assert!((fin_bound - fin_oracle).abs() <= 1e-12 * fin_oracle);
                    max_avg_ratio = max_avg_ratio.max(avg_mean / avg_bound);
                    max_final_z = max_final_z.max((fin_mean - fin_bound) / fin_se);
                    if avg_mean > avg_bound + 2.0 * avg_se {
                        fails.push(format!("avg alpha={alpha} lambda={lambda} s={s} n={n}"));
                    }
                    if fin_mean > fin_bound + 2.0 * fin_se {
                        fails.push(format!("final alpha={alpha} lambda={lambda} s={s} n={n}"));
                    }
                }
            }
        }
    }
    let pass = fails.is_empty();
    report(
        4,
        "regret table audit",
        pass,
        &format!(
            "{cells} cells, max E[L(w_avg)]/bound {max_avg_ratio:.3}, max (E[L(w_n)] - bound)/SE {max_final_z:.2}, violations {fails:?}"
        ),
    );
    assert!(pass);
}

#[test]
fn c05_preconditioner_benefit() {
    // Small gradient noise: the comparison concerns the noise-independent
    // term, which dominates here. The noisier s = 1e-2 case is reported too.
    let (p, alpha, n, seeds) = (200, 0.5, 2000u64, 20);
    let lambdas = "loguniform:0.001,1"
        .parse::<LambdaSpec>()
        .unwrap()
        .build(p)
        .unwrap();
    let lo = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lambdas.iter().cloned().fold(0.0, f64::max);
    assert!((lo - 1e-3).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    let w0 = ParamVector::filled(p, 1.0);
    let collect = Collect {
        final_iterate: false,
        ia: true,
        ema: None,
    };
    let losses = |s: f64| -> Vec<Vec<f64>> {
        [Preconditioner::Identity, Preconditioner::InvSqrtH]
            .into_iter()
            .map(|precond| {
                let model = QuadModel::new(lambdas.clone(), s, 1, precond).unwrap();
                let sim = Simulation::new(alpha, n, seeds)
                    .collect(collect)
                    .base_seed(50)
                    .mode(mode());
                simulate(&model, &w0, &sim).unwrap().avg_losses
            })
            .collect()
    };
    let wins = |l: &[Vec<f64>]| l[1].iter().zip(&l[0]).filter(|(b, i)| b < i).count();
    let quiet = losses(1e-3);
    let noisy = losses(1e-2);
    let pass = wins(&quiet) >= 18;
    report(
        5,
        "preconditioner benefit",
        pass,
        &format!(
            "s=1e-3: inv_sqrt_H wins {}/{seeds}, mean L(w_avg) identity {:.4e} vs inv_sqrt_H {:.4e}; s=1e-2 (noise-dominated): wins {}/{seeds}, {:.4e} vs {:.4e}",
            wins(&quiet),
            mean_var(&quiet[0]).0,
            mean_var(&quiet[1]).0,
            wins(&noisy),
            mean_var(&noisy[0]).0,
            mean_var(&noisy[1]).0
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------------- optimizers

/// Decoupled Adam written out longhand. `inside` puts eps under the root.
struct RefAdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    inside: bool,
}

impl RefAdamW {
    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            let denom = if self.inside {
                (vh + eps).sqrt()
            } else {
                vh.sqrt() + eps
            };
            theta[i] = theta[i] * (1.0 - lr * wd) - lr * mh / denom;
        }
    }
}

#[test]
fn c06_optimizer_equivalences() {
    let (dim, steps, wd) = (40, 500, 0.01);
    let mut rng = RngStream::new(60, 0);
    let theta0 = ParamVector::new((0..dim).map(|_| rng.standard_normal()).collect());
    let grads: Vec<ParamVector> = (0..steps)
        .map(|_| ParamVector::new((0..dim).map(|_| 0.5 * rng.standard_normal()).collect()))
        .collect();
    let lrs: Vec<f64> = (0..steps)
        .map(|_| 1e-3 * (1.0 + 9.0 * rng.below(1000) as f64 / 1000.0))
        .collect();

    let mut adam_dev: f64 = 0.0;
    for placement in [EpsPlacement::Inside, EpsPlacement::Outside] {
        let mut cfg = OptimizerConfig::new(Preset::GadamInner, wd);
        cfg.overrides = HyperOverrides {
            eps_placement: Some(placement),
            ..Default::default()
        };
        let mut opt = Optimizer::build(&cfg, &theta0).unwrap();
        let mut theta = theta0.clone();
        let mut reference = RefAdamW {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            inside: placement == EpsPlacement::Inside,
        };
        let mut ref_theta = theta0.as_slice().to_vec();
        for k in 0..steps {
            opt.step(&mut theta, &grads[k], lrs[k]).unwrap();
            reference.step(&mut ref_theta, grads[k].as_slice(), lrs[k], wd);
            adam_dev = adam_dev.max(
                theta
                    .max_abs_diff(&ParamVector::new(ref_theta.clone()))
                    .unwrap(),
            );
        }
    }

    let mut cfg = OptimizerConfig::new(Preset::GadamInner, 0.0);
    cfg.overrides = HyperOverrides {
        p: Some(0.0),
        beta1: Some(0.0),
        ..Default::default()
    };
    let mut adaptive = Optimizer::build(&cfg, &theta0).unwrap();
    let mut sgd = Optimizer::build(&OptimizerConfig::new(Preset::Sgd, 0.0), &theta0).unwrap();
    let (mut ta, mut ts) = (theta0.clone(), theta0.clone());
    let mut sgd_exact = true;
    for k in 0..steps {
        adaptive.step(&mut ta, &grads[k], lrs[k]).unwrap();
        sgd.step(&mut ts, &grads[k], lrs[k]).unwrap();
        sgd_exact &= ta == ts;
    }

    let lam = 0.05;
    let coupled = SgdHyper {
        beta: 0.0,
        l2: lam,
        lambda_decoupled: 0.0,
    };
    let decoupled = SgdHyper {
        beta: 0.0,
        l2: 0.0,
        lambda_decoupled: lam,
    };
    let (mut sc, mut sd) = (SgdState::new(dim), SgdState::new(dim));
    let (mut tc, mut td) = (theta0.clone(), theta0.clone());
    let mut l2_dev: f64 = 0.0;
    for k in 0..steps {
        sc.step(&mut tc, &grads[k], lrs[k], &coupled).unwrap();
        sd.step(&mut td, &grads[k], lrs[k], &decoupled).unwrap();
        l2_dev = l2_dev.max(tc.max_abs_diff(&td).unwrap());
    }

    let pass = adam_dev <= 1e-12 && sgd_exact && l2_dev <= 1e-12;
    report(
        6,
        "optimizer equivalences",
        pass,
        &format!(
            "gadam vs reference max dev {adam_dev:.2e} (both eps placements), p=0/beta1=0 bitwise SGD: {sgd_exact}, decoupled vs L2 max dev {l2_dev:.2e}"
        ),
    );
    assert!(pass);
}

// -------------------------------------------------------------- task models

fn blobs(seed: u64, n: usize, d: usize, classes: usize) -> DataBatch {
    make_blobs(&mut RngStream::new(seed, 0), n, d, classes, 3.0, 0.1)
        .unwrap()
        .train
}

fn fd_worst(model: &TaskModel, batch: &DataBatch, rng: &mut RngStream, coords: usize) -> f64 {
    let h = 1e-5;
    let lg = model.loss_and_grad(batch, 0.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.below(model.num_params());
        let mut plus = model.theta.clone();
        plus[i] += h;
        let mut minus = model.theta.clone();
        minus[i] -= h;
        let fd = (model.loss_and_grad_with(&plus, batch, 0.0).unwrap().loss
            - model.loss_and_grad_with(&minus, batch, 0.0).unwrap().loss)
            / (2.0 * h);
        let a = lg.grad[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

#[test]
fn c07_gradient_correctness() {
    let archs = [
        ("logistic", Architecture::logistic(20, 5)),
        ("mlp", Architecture::mlp(20, &[32, 32], 5, false)),
        ("mlp+bn", Architecture::mlp(20, &[32, 32], 5, true)),
    ];
    let mut worst_by_arch = Vec::new();
    let mut pass = true;
    for (name, arch) in &archs {
        let mut worst: f64 = 0.0;
        for seed in 0..5u64 {
            let batch = blobs(70 + seed, 200, 20, 5).subset(&(0..64).collect::<Vec<_>>());
            let mut model = TaskModel::init(
                arch.clone(),
                BnConfig::default(),
                &mut RngStream::new(seed, 2),
                false,
            )
            .unwrap();
            let mut rng = RngStream::new(seed, 7);
            for m in [Mode::Train, Mode::Eval] {
                model.mode = m;
                if m == Mode::Eval && arch.batch_norm {
                    model.bn_running = model
                        .population_bn_stats(std::slice::from_ref(&batch))
                        .unwrap();
                }
                worst = worst.max(fd_worst(&model, &batch, &mut rng, 20));
            }
        }
        pass &= worst <= 1e-5;
        worst_by_arch.push(format!("{name} {worst:.2e}"));
    }
    report(
        7,
        "gradient correctness",
        pass,
        &format!("max rel err: {}", worst_by_arch.join(", ")),
    );
    assert!(pass);
}

#[test]
fn c08_bn_scale_invariance() {
    let batch = blobs(80, 200, 20, 5).subset(&(0..128).collect::<Vec<_>>());
    let tight = BnConfig {
        eps: 1e-12,
        ..BnConfig::default()
    };
    let bn = TaskModel::init(
        Architecture::mlp(20, &[32, 32], 5, true),
        tight,
        &mut RngStream::new(8, 2),
        false,
    )
    .unwrap();
    let bn_default = TaskModel::init(
        Architecture::mlp(20, &[32, 32], 5, true),
        BnConfig::default(),
        &mut RngStream::new(8, 2),
        false,
    )
    .unwrap();
    let plain = TaskModel::init(
        Architecture::mlp(20, &[32, 32], 5, false),
        BnConfig::default(),
        &mut RngStream::new(8, 2),
        false,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_default: f64 = 0.0;
    let mut control = f64::INFINITY;
    for c in [0.5, 3.0] {
        worst = worst.max(bn.bn_scale_invariance_check(&batch, c).unwrap());
        worst_default = worst_default.max(bn_default.bn_scale_invariance_check(&batch, c).unwrap());
        control = control.min(plain.scaled_output_deviation(&batch, c).unwrap());
    }
    let pass = worst <= 1e-8 && control > 1e-3;
    report(
        8,
        "BN scale invariance",
        pass,
        &format!("max deviation {worst:.2e} at bn eps 1e-12 ({worst_default:.2e} at eps 1e-5), no-BN control min {control:.3}"),
    );
    assert!(pass);
}

fn dense_hessian<O: Objective>(obj: &O, theta: &ParamVector, h: f64) -> nalgebra::DMatrix<f64> {
    let n = obj.dim();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = theta.clone();
        plus[j] += h;
        let mut minus = theta.clone();
        minus[j] -= h;
        let gp = obj.gradient(&plus).unwrap();
        let gm = obj.gradient(&minus).unwrap();
        for i in 0..n {
            m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

#[test]
fn c09_sharpness_oracles() {
    let batch = blobs(90, 300, 6, 3).subset(&(0..120).collect::<Vec<_>>());
    let mut model = TaskModel::init(
        Architecture::mlp(6, &[10, 6], 3, false),
        BnConfig::default(),
        &mut RngStream::new(9, 2),
        false,
    )
    .unwrap();
    model.mode = Mode::Eval;
    assert!(model.num_params() <= 200);
    // A short training run moves the point away from initialisation.
    let mut opt = Optimizer::build(&OptimizerConfig::new(Preset::Adam, 0.0), &model.theta).unwrap();
    for _ in 0..200 {
        let g = model.loss_and_grad(&batch, 0.0).unwrap().grad;
        let mut theta = model.theta.clone();
        opt.step(&mut theta, &g, 0.01).unwrap();
        model.theta = theta;
    }
    let obj = TaskObjective {
        model: &model,
        batch: &batch,
        l2: 0.0,
    };
    let h = 1e-6;
    let dense = dense_hessian(&obj, &model.theta, h);
    let eig = nalgebra::SymmetricEigen::new(dense.clone());
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let trace = dense.trace();
    let frob = dense.norm();

    let probe = ParamVector::new(
        (0..model.num_params())
            .map(|i| ((i * 7) % 5) as f64 - 2.0)
            .collect(),
    );
    let hv = hessian_vector_product(&obj, &model.theta, &probe, Some(h)).unwrap();
    let dense_hv = &dense * nalgebra::DVector::from_column_slice(probe.as_slice());
    let hvp_dev = hv
        .iter()
        .zip(dense_hv.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let power = spectral_norm(
        &obj,
        &model.theta,
        3000,
        &mut RngStream::new(91, 0),
        Some(h),
    )
    .unwrap();
    let tr = trace_estimate(
        &obj,
        &model.theta,
        1000,
        &RngStream::new(92, 0),
        Some(h),
        mode(),
    )
    .unwrap();
    let fr = frobenius_estimate(
        &obj,
        &model.theta,
        1000,
        &RngStream::new(93, 0),
        Some(h),
        mode(),
    )
    .unwrap();
    let power_rel = (power - lam_max).abs() / lam_max;
    let tr_rel = (tr - trace).abs() / trace.abs();
    let fr_rel = (fr - frob).abs() / frob;
    let pass = power_rel <= 1e-6 && tr_rel <= 0.02 && fr_rel <= 0.05;
    report(
        9,
        "sharpness oracles",
        pass,
        &format!(
            "P={}, spectral {power:.6} vs {lam_max:.6} (rel {power_rel:.1e}), trace {tr:.4} vs {trace:.4} ({:.2}%), frobenius {fr:.4} vs {frob:.4} ({:.2}%), hvp vs dense {hvp_dev:.1e}",
            model.num_params(),
            100.0 * tr_rel,
            100.0 * fr_rel
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ desk training

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_config(preset: &str, wd: f64, schedule: &str, averaging: bool, extra: &str) -> RunConfig {
    let averaging = if averaging {
        r#","averaging": {"start": 30}"#
    } else {
        ""
    };
    RunConfig::from_json(&format!(
        r#"{{
        "task": {{"kind": "mlp", "hidden": [32, 32], "batch_norm": true,
                 "data": {{"source": "blobs", "n": 2000, "d": 20, "classes": 5, "sep": 3.0, "label_noise": 0.1}}}},
        "optimizer": {{"preset": "{preset}", "weight_decay": {wd}}},
        "schedule": {schedule},
        "epochs": 60,
        "batch_size": 32
        {averaging}
        {extra}
    }}"#
    ))
    .unwrap()
}

fn gadam_config(wd: f64, extra: &str) -> RunConfig {
    desk_config(
        "gadam_inner",
        wd,
        r#"{"kind": "linear_ia", "alpha0": 0.001, "t_avg": 30}"#,
        true,
        extra,
    )
}

struct Desk {
    gadam: Vec<RunOutcome>,
    adamw: Vec<RunOutcome>,
    sgd_ia: Vec<RunOutcome>,
    sgd: Vec<RunOutcome>,
    secs: f64,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let runs = |cfg: RunConfig| -> Vec<RunOutcome> {
            SEEDS
                .iter()
                .map(|&s| run_seed(&cfg, s, None, None).unwrap())
                .collect()
        };
        let gadam = runs(gadam_config(5e-4, ""));
        let adamw = runs(desk_config(
            "adamw",
            5e-4,
            r#"{"kind": "linear", "alpha0": 0.001}"#,
            false,
            "",
        ));
        let sgd_ia = runs(desk_config(
            "sgd_momentum",
            5e-4,
            r#"{"kind": "linear_ia", "alpha0": 0.05, "t_avg": 30}"#,
            true,
            "",
        ));
        let sgd = runs(desk_config(
            "sgd_momentum",
            5e-4,
            r#"{"kind": "linear", "alpha0": 0.05}"#,
            false,
            "",
        ));
        Desk {
            gadam,
            adamw,
            sgd_ia,
            sgd,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn accs(runs: &[RunOutcome]) -> Vec<f64> {
    runs.iter().map(|o| o.final_test.accuracy).collect()
}

#[test]
fn c10_averaging_beats_base() {
    let d = desk();
    let count = |x: &[RunOutcome], y: &[RunOutcome]| {
        accs(x)
            .iter()
            .zip(accs(y))
            .filter(|(a, b)| **a >= *b)
            .count()
    };
    let adam_wins = count(&d.gadam, &d.adamw);
    let sgd_wins = count(&d.sgd_ia, &d.sgd);
    let pass = adam_wins >= 4 && sgd_wins >= 4 && d.secs < 300.0;
    report(
        10,
        "averaging beats base",
        pass,
        &format!(
            "gadam >= adamw in {adam_wins}/5 ({:.4?} vs {:.4?}), sgd+ia >= sgd in {sgd_wins}/5 ({:.4?} vs {:.4?}), {:.1} s",
            accs(&d.gadam),
            accs(&d.adamw),
            accs(&d.sgd_ia),
            accs(&d.sgd),
            d.secs
        ),
    );
    assert!(pass);
}

#[test]
fn c11_diversity_grows_with_decay() {
    let decays = [0.0, 1e-4, 5e-4, 1e-3];
    let mut increasing = 0;
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let mut div = Vec::new();
        for &wd in &decays {
            let cfg = gadam_config(wd, r#","snapshots": {"from": 31}"#);
            let o = run_seed(&cfg, seed, None, None).unwrap();
            div.push(
                pairwise_diversity(&o.snapshots, DiversityMetric::SymKl)
                    .unwrap()
                    .mean_per_example,
            );
        }
        if div.windows(2).all(|w| w[1] > w[0]) {
            increasing += 1;
        }
        rows.push(format!(
            "seed {seed}: {}",
            div.iter()
                .map(|x| format!("{x:.5}"))
                .collect::<Vec<_>>()
                .join("<")
        ));
    }
    let pass = increasing >= 4;
    report(
        11,
        "diversity grows with decay",
        pass,
        &format!(
            "strictly increasing in {increasing}/5 seeds; {}",
            rows.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn c12_last_iterate_is_best() {
    let d = desk();
    let mut hits = 0;
    let mut rows = Vec::new();
    for o in &d.gadam {
        let errs: Vec<f64> = o.records.iter().map(|r| 1.0 - r.val_acc).collect();
        let best = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        let last = *errs.last().unwrap();
        if last <= best {
            hits += 1;
        }
        let at = errs.iter().position(|e| *e == best).unwrap() + 1;
        rows.push(format!(
            "seed {}: final {last:.4}, best {best:.4} @ {at}",
            o.seed
        ));
    }
    let pass = hits >= 3;
    report(
        12,
        "last iterate is best",
        pass,
        &format!(
            "final epoch is the validation minimum in {hits}/5 (target 4/5, gate 3/5); {}",
            rows.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn c13_jensen_regret_audit() {
    let presets = [
        "sgd",
        "sgd_momentum",
        "adamw",
        "gadam_inner",
        "gadamx_inner",
    ];
    let mut audited = 0;
    let mut failures = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for preset in presets {
        let (lr, wd) = if preset.starts_with("sgd") {
            (0.05, 1e-4)
        } else {
            (0.003, 1e-4)
        };
        let cfg = RunConfig::from_json(&format!(
            r#"{{
            "task": {{"kind": "logistic",
                     "data": {{"source": "blobs", "n": 2000, "d": 20, "classes": 5, "sep": 3.0, "label_noise": 0.1}}}},
            "optimizer": {{"preset": "{preset}", "weight_decay": {wd}}},
            "schedule": {{"kind": "linear_ia", "alpha0": {lr}, "t_avg": 10}},
            "averaging": {{"start": 10}},
            "epochs": 20,
            "batch_size": 32
        }}"#
        ))
        .unwrap();
        for &seed in &SEEDS {
            let out = run_seed(&cfg, seed, None, None).unwrap();
            let (ds, model) = cfg.task.instantiate(seed).unwrap();
            let l_star =
                reference_loss(&model, &ds.train, &out.final_model.theta, 500, 0.01).unwrap();
            let audit = regret_audit(&out, l_star).expect("logistic runs are audited");
            audited += 1;
            worst_margin =
                worst_margin.min(audit.avg_regret + 2.0 * audit.std_error - audit.final_gap);
            if !audit.pass {
                failures.push(format!("{preset}/seed{seed}"));
            }
        }
    }
    let pass = failures.is_empty() && audited == presets.len() * SEEDS.len();
    report(
        13,
        "Jensen regret audit",
        pass,
        &format!("{audited} convex runs audited, failures {failures:?}, smallest margin {worst_margin:.3e}"),
    );
    assert!(pass);
}

#[test]
fn c14_determinism_and_resume() {
    let mut cfg = gadam_config(5e-4, r#","snapshots": {"from": 8}, "checkpoint_every": 4"#);
    cfg.epochs = 12;
    cfg.schedule.total_epochs = None;
    cfg.schedule.t_avg = Some(6.0);
    cfg.averaging.as_mut().unwrap().start = Some(gavg_core::averaging::AvgStart::Epoch(6));
    cfg.seeds = vec![0, 1];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (d, m) in dirs
        .iter()
        .zip([Parallelism::Rayon, Parallelism::Sequential])
    {
        let mut c = cfg.clone();
        c.out_dir = Some(d.path().to_path_buf());
        run(&c, m).unwrap();
    }
    let mut compared = 0;
    let mut identical = true;
    for &seed in &cfg.seeds {
        let a = seed_dir(dirs[0].path(), seed);
        let mut names: Vec<String> = std::fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".csv") || n.ends_with(".json") || n.ends_with(".bin"))
            .collect();
        names.sort();
        for n in &names {
            compared += 1;
            identical &= std::fs::read(a.join(n)).unwrap()
                == std::fs::read(seed_dir(dirs[1].path(), seed).join(n)).unwrap();
        }
    }

    let full = run_seed(&cfg, 1, None, None).unwrap();
    let mut resumed_ok = true;
    for epoch in [4, 8] {
        let ck =
            Checkpoint::load(&seed_dir(dirs[0].path(), 1).join(checkpoint_name(epoch))).unwrap();
        let resumed = run_seed(&cfg, 1, None, Some(ck)).unwrap();
        // Snapshots up to the checkpoint are already on disk; the resumed
        // invocation produces the rest.
        let tail: Vec<_> = full
            .snapshots
            .iter()
            .filter(|s| s.epoch > epoch)
            .cloned()
            .collect();
        resumed_ok &= records_csv(&resumed.records) == records_csv(&full.records)
            && resumed.final_model.theta == full.final_model.theta
            && resumed.snapshots == tail;
    }
    let pass = identical && resumed_ok && compared > 0;
    report(
        14,
        "determinism and resume",
        pass,
        &format!("{compared} output files byte-identical across repeated runs: {identical}; resume from epochs 4 and 8 exact: {resumed_ok}"),
    );
    assert!(pass);
}
