use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::averaging::{
    recompute_bn_stats, AveragerState, AvgFreq, AvgKind, EmaState, TriggerState,
};
use crate::error::{GavgError, Result};
use crate::metrics::SoftmaxSnapshot;
use crate::numerics::{ParamVector, RngStream};
use crate::optimizers::Optimizer;
use crate::parallel::{map_slice, Parallelism};
use crate::tasks::{DataBatch, Dataset, EvalResult, TaskModel, LAYOUT_VERSION};

use super::checkpoint::{Checkpoint, FORMAT_VERSION};
use super::config::{RunConfig, Split};
use super::record::{records_csv, RunRecord};
use super::write_atomic;

/// Stream of a run seed that drives minibatch shuffling.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    /// Returned weights: the average when averaging is active, else the
    /// last iterate.
    pub final_model: TaskModel,
    pub last_iterate: ParamVector,
    pub averaged: bool,
    /// Snapshot indices absorbed into the average (epochs or steps).
    pub avg_log: Vec<u64>,
    pub final_train: EvalResult,
    pub final_val: EvalResult,
    pub final_test: EvalResult,
    /// Lowest validation error over all epochs.
    pub best_val_err: f64,
    /// Snapshots taken by this invocation; a resumed run holds only those
    /// after its checkpoint.
    pub snapshots: Vec<SoftmaxSnapshot>,
    /// Training loss at every absorbed snapshot, kept for convex tasks.
    pub snapshot_losses: Vec<f64>,
    pub convex: bool,
    /// Ordering audit: every evaluation of averaged weights was preceded by
    /// a BN-statistics recomputation at those weights.
    pub bn_recomputations: u64,
    pub averaged_evaluations: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    config_hash: &'a str,
    epochs: u64,
    averaged: bool,
    n_models: usize,
    final_train_loss: f64,
    final_val_acc: f64,
    final_test_acc: f64,
    best_val_acc: f64,
}

/// Gate that enforces BN recomputation before evaluating averaged weights.
#[derive(Default)]
struct BnOrdering {
    fresh: bool,
    recomputations: u64,
    evaluations: u64,
}

impl BnOrdering {
    fn prepare(
        &mut self,
        model: &mut TaskModel,
        stream: &[DataBatch],
        weights: &ParamVector,
    ) -> Result<()> {
        recompute_bn_stats(model, stream, weights)?;
        self.fresh = true;
        self.recomputations += 1;
        Ok(())
    }

    fn evaluate(&mut self, model: &TaskModel, ds: &Dataset) -> Result<[EvalResult; 3]> {
        assert!(
            self.fresh,
            "averaged weights evaluated without BN recomputation"
        );
        self.fresh = false;
        self.evaluations += 1;
        evaluate_all(model, ds)
    }
}

fn evaluate_all(model: &TaskModel, ds: &Dataset) -> Result<[EvalResult; 3]> {
    Ok([
        model.evaluate(&ds.train)?,
        model.evaluate(&ds.val)?,
        model.evaluate(&ds.test)?,
    ])
}

fn diverged(epoch: u64) -> impl Fn(GavgError) -> GavgError {
    move |e| match e {
        GavgError::Numeric { .. } => GavgError::Divergence(format!("epoch {}: {e}", epoch + 1)),
        other => other,
    }
}

fn split<'a>(ds: &'a Dataset, s: Split) -> &'a DataBatch {
    match s {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    }
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed{seed}"))
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_epoch{epoch:04}.bin")
}

struct RunState {
    epoch: u64,
    step: u64,
    averager: Option<AveragerState>,
    ema: Option<EmaState>,
    trigger: Option<TriggerState>,
    rng: RngStream,
    records: Vec<RunRecord>,
    snapshot_losses: Vec<f64>,
}

/// Trains one seed of `cfg`, optionally resuming from a checkpoint.
/// Files go under `out_dir` when given (records, snapshots, checkpoints,
/// summary); on divergence the partial records are still written.
pub fn run_seed(
    cfg: &RunConfig,
    seed: u64,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let hash = cfg.family_hash();
    let schedule = cfg.effective_schedule();
    let (ds, mut model) = cfg.task.instantiate(seed)?;
    let convex = cfg.task.is_convex();
    let mut opt = Optimizer::build(&cfg.optimizer, &model.theta)?;
    let p = model.num_params();
    let bn_stream = ds.train.chunks(cfg.batch_size);
    let iters_per_epoch = bn_stream.len() as u64;
    let avg_cfg = cfg.averaging.clone();

    let make_averager = |start_epoch: u64| -> Result<AveragerState> {
        match avg_cfg.as_ref().map(|a| a.freq) {
            Some(AvgFreq::Iterations(n)) => AveragerState::new(p, start_epoch * iters_per_epoch, n),
            _ => AveragerState::new(p, start_epoch, 1),
        }
    };

    let mut st = match resume {
        Some(ck) => {
            if ck.config_hash != hash {
                return Err(GavgError::Checkpoint(
                    "checkpoint belongs to a different config".into(),
                ));
            }
            if ck.seed != seed
                || ck.layout_version != LAYOUT_VERSION
                || ck.format_version != FORMAT_VERSION
            {
                return Err(GavgError::Checkpoint(
                    "checkpoint seed or layout does not match".into(),
                ));
            }
            if ck.theta.len() != p || ck.epoch > cfg.epochs {
                return Err(GavgError::Checkpoint(
                    "checkpoint does not fit this run".into(),
                ));
            }
            model.theta = ck.theta;
            model.bn_running = ck.bn_running;
            opt.import_state(&ck.optimizer)?;
            RunState {
                epoch: ck.epoch,
                step: ck.step,
                averager: ck.averager,
                ema: ck.ema,
                trigger: ck.trigger,
                rng: RngStream::from_state(ck.rng),
                records: ck.records,
                snapshot_losses: ck.snapshot_losses,
            }
        }
        None => {
            let averager = match avg_cfg.as_ref().and_then(|a| a.start_epoch(cfg.epochs)) {
                Some(start) => Some(make_averager(start)?),
                None => None,
            };
            let trigger = avg_cfg
                .as_ref()
                .filter(|a| a.start_epoch(cfg.epochs).is_none())
                .map(|a| TriggerState::new(a.patience));
            RunState {
                epoch: 0,
                step: 0,
                averager,
                ema: None,
                trigger,
                rng: RngStream::new(seed, SHUFFLE_STREAM),
                records: Vec::new(),
                snapshot_losses: Vec::new(),
            }
        }
    };

    let dir = out_dir.map(|d| seed_dir(d, seed));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let checkpoint = |st: &RunState, model: &TaskModel, opt: &Optimizer| -> Result<()> {
        let Some(d) = &dir else { return Ok(()) };
        Checkpoint {
            format_version: FORMAT_VERSION,
            layout_version: LAYOUT_VERSION,
            config_hash: hash.clone(),
            seed,
            epoch: st.epoch,
            step: st.step,
            theta: model.theta.clone(),
            bn_running: model.bn_running.clone(),
            optimizer: opt.export_state(),
            averager: st.averager.clone(),
            ema: st.ema.clone(),
            trigger: st.trigger.clone(),
            rng: st.rng.state(),
            records: st.records.clone(),
            snapshot_losses: st.snapshot_losses.clone(),
        }
        .save(&d.join(checkpoint_name(st.epoch)))
    };
    if st.epoch == 0 {
        checkpoint(&st, &model, &opt)?;
    }

    let kind = avg_cfg.as_ref().map(|a| a.kind).unwrap_or_default();
    let rho = avg_cfg.as_ref().map_or(0.0, |a| a.rho);
    let mut ordering = BnOrdering::default();
    let mut snapshots = Vec::new();

    // Absorbs the current iterate if the averaging grid says so.
    let absorb = |st: &mut RunState, index: u64, model: &TaskModel| -> Result<()> {
        let Some(avg) = st.averager.as_mut() else {
            return Ok(());
        };
        if !avg.offer(index, &model.theta)? {
            return Ok(());
        }
        if kind == AvgKind::Ema {
            match st.ema.as_mut() {
                Some(e) => e.absorb(&model.theta)?,
                None => {
                    let mut e = EmaState::new(model.theta.clone(), rho)?;
                    e.absorb(&model.theta)?;
                    st.ema = Some(e);
                }
            }
        }
        if convex {
            st.snapshot_losses.push(model.evaluate(&ds.train)?.loss);
        }
        Ok(())
    };

    let outcome: Result<Option<[EvalResult; 3]>> = (|| {
        let mut last_eval = None;
        while st.epoch < cfg.epochs {
            let e = st.epoch;
            let t0 = cfg.timing.then(Instant::now);
            let lr_epoch = schedule.lr_at(e as f64)?;
            let batches = ds.train.minibatches(cfg.batch_size, &mut st.rng);
            let nb = batches.len() as f64;
            model.mode = crate::tasks::Mode::Train;
            for (i, batch) in batches.iter().enumerate() {
                let lr = if schedule.per_iteration {
                    schedule.lr_at(e as f64 + i as f64 / nb)?
                } else {
                    lr_epoch
                };
                let lg = model.train_step_grad(batch, 0.0).map_err(diverged(e))?;
                opt.step(&mut model.theta, &lg.grad, lr)
                    .map_err(diverged(e))?;
                if matches!(
                    avg_cfg.as_ref().map(|a| a.freq),
                    Some(AvgFreq::Iterations(_))
                ) {
                    let step = st.step;
                    absorb(&mut st, step, &model).map_err(diverged(e))?;
                }
                st.step += 1;
            }
            model.mode = crate::tasks::Mode::Eval;
            if matches!(avg_cfg.as_ref().map(|a| a.freq), Some(AvgFreq::Epoch)) {
                absorb(&mut st, e, &model).map_err(diverged(e))?;
            }

            let iterate_eval = evaluate_all(&model, &ds).map_err(diverged(e))?;
            let averaged_weights = match (&st.averager, kind) {
                (Some(a), AvgKind::Ia) if a.is_active() => Some(&a.theta_avg),
                (Some(_), AvgKind::Ema) => st.ema.as_ref().map(|m| &m.theta_ema),
                _ => None,
            };
            let avg_active = averaged_weights.is_some();
            let reported = match averaged_weights {
                Some(w) => {
                    let mut avg_model = model.clone();
                    ordering
                        .prepare(&mut avg_model, &bn_stream, w)
                        .map_err(diverged(e))?;
                    ordering.evaluate(&avg_model, &ds).map_err(diverged(e))?
                }
                None => iterate_eval,
            };
            if reported.iter().any(|r| !r.loss.is_finite()) {
                return Err(GavgError::Divergence(format!(
                    "epoch {}: non-finite evaluation loss",
                    e + 1
                )));
            }
            if let Some(trig) = st.trigger.as_mut() {
                if trig.observe(1.0 - iterate_eval[1].accuracy) && st.averager.is_none() {
                    st.averager = Some(make_averager(e + 1)?);
                }
            }

            let eff_lr = if model.bn_layer_count() > 0 {
                model
                    .effective_lr(lr_epoch)
                    .ok()
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            } else {
                None
            };
            st.records.push(RunRecord {
                epoch: e + 1,
                train_loss: reported[0].loss,
                train_acc: reported[0].accuracy,
                val_loss: reported[1].loss,
                val_acc: reported[1].accuracy,
                test_acc: reported[2].accuracy,
                lr: lr_epoch,
                eff_lr,
                theta_norm: model.theta.norm(),
                avg_active,
                wall_ms: t0.map_or(0, |t| t.elapsed().as_millis() as u64),
            });
            st.epoch += 1;

            if let Some(policy) = cfg.snapshots.as_ref().filter(|s| s.is_due(e + 1)) {
                let snap =
                    SoftmaxSnapshot::new(e + 1, model.predict_proba(split(&ds, policy.split))?)?;
                if let Some(d) = &dir {
                    let mut buf = Vec::new();
                    snap.write_csv(&mut buf)?;
                    write_atomic(&d.join(SoftmaxSnapshot::file_name(e + 1)), &buf)?;
                }
                snapshots.push(snap);
            }
            if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 {
                checkpoint(&st, &model, &opt)?;
            }
            last_eval = Some(reported);
        }
        Ok(last_eval)
    })();

    if let Some(d) = &dir {
        write_atomic(&d.join("records.csv"), records_csv(&st.records).as_bytes())?;
    }
    let last_eval = outcome?;

    let last_iterate = model.theta.clone();
    model.mode = crate::tasks::Mode::Eval;
    let final_weights = match (&st.averager, kind) {
        (Some(a), AvgKind::Ia) if a.is_active() => Some(a.theta_avg.clone()),
        (Some(_), AvgKind::Ema) => st.ema.as_ref().map(|m| m.theta_ema.clone()),
        _ => None,
    };
    let averaged = final_weights.is_some();
    let final_eval = match final_weights {
        Some(w) => {
            ordering.prepare(&mut model, &bn_stream, &w)?;
            ordering.evaluate(&model, &ds)?
        }
        None => match last_eval {
            Some(ev) => ev,
            None => evaluate_all(&model, &ds)?,
        },
    };
    let best_val_err = st
        .records
        .iter()
        .map(|r| 1.0 - r.val_acc)
        .fold(f64::INFINITY, f64::min);

    if let Some(d) = &dir {
        let summary = Summary {
            seed,
            config_hash: &hash,
            epochs: cfg.epochs,
            averaged,
            n_models: st.averager.as_ref().map_or(0, |a| a.log.len()),
            final_train_loss: final_eval[0].loss,
            final_val_acc: final_eval[1].accuracy,
            final_test_acc: final_eval[2].accuracy,
            best_val_acc: 1.0 - best_val_err.min(1.0),
        };
        let text = serde_json::to_string_pretty(&summary)? + "\n";
        write_atomic(&d.join("summary.json"), text.as_bytes())?;
    }

    Ok(RunOutcome {
        seed,
        records: st.records,
        final_model: model,
        last_iterate,
        averaged,
        avg_log: st.averager.map(|a| a.log).unwrap_or_default(),
        final_train: final_eval[0],
        final_val: final_eval[1],
        final_test: final_eval[2],
        best_val_err,
        snapshots,
        snapshot_losses: st.snapshot_losses,
        convex,
        bn_recomputations: ordering.recomputations,
        averaged_evaluations: ordering.evaluations,
    })
}

/// Every seed of `cfg`, independent runs spread over the worker pool.
/// Writes `config.json` at the output root.
pub fn run(cfg: &RunConfig, mode: Parallelism) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let out = cfg.resolved_out_dir();
    if let Some(d) = &out {
        std::fs::create_dir_all(d)?;
        write_atomic(
            &d.join("config.json"),
            (cfg.to_json_pretty() + "\n").as_bytes(),
        )?;
    }
    map_slice(mode, &cfg.seeds, |&seed| {
        run_seed(cfg, seed, out.as_deref(), None)
    })
    .into_iter()
    .collect()
}
