//! Experiment runner: config, per-seed training loop, checkpoints, grids
//! and the convex regret audit.

mod checkpoint;
mod config;
mod record;
mod run;

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{GavgError, Result};
use crate::numerics::{mean_var, ParamVector};
use crate::optimizers::{Optimizer, OptimizerConfig, Preset};
use crate::parallel::{map_indexed, Parallelism};
use crate::tasks::{DataBatch, Mode, TaskModel};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{GridSpec, RunConfig, SnapshotPolicy, Split, OUT_DIR_ENV};
pub use record::{records_csv, write_records, RunRecord, RECORD_HEADER};
pub use run::{checkpoint_name, run, run_seed, seed_dir, RunOutcome};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| GavgError::config(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub preset: String,
    pub weight_decay: f64,
    pub runs: usize,
    pub failed: usize,
    /// Over the runs that finished.
    pub mean_test_acc: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_test_acc: f64,
    pub test_accs: Vec<f64>,
}

pub const GRID_HEADER: &str = "preset,weight_decay,runs,failed,mean_test_acc,std_test_acc";

pub fn write_grid_csv<W: Write>(cells: &[GridCell], mut out: W) -> Result<()> {
    writeln!(out, "{GRID_HEADER}")?;
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.preset, c.weight_decay, c.runs, c.failed, c.mean_test_acc, c.std_test_acc
        )?;
    }
    Ok(())
}

/// Runs seeds x presets x weight decays (from `cfg.grid`, or the config's
/// own optimizer when absent). A failed run marks its cell; the rest go on.
pub fn grid(cfg: &RunConfig, mode: Parallelism) -> Result<Vec<GridCell>> {
    cfg.validate()?;
    let (presets, decays) = match &cfg.grid {
        Some(g) => (g.presets.clone(), g.weight_decays.clone()),
        None => (
            vec![cfg.optimizer.preset.clone()],
            vec![cfg.optimizer.weight_decay],
        ),
    };
    let mut cells: Vec<(Preset, f64)> = Vec::new();
    for p in &presets {
        for &wd in &decays {
            cells.push((p.clone(), wd));
        }
    }
    let out = cfg.resolved_out_dir();
    if let Some(d) = &out {
        std::fs::create_dir_all(d)?;
        write_atomic(
            &d.join("config.json"),
            (cfg.to_json_pretty() + "\n").as_bytes(),
        )?;
    }
    let n_seeds = cfg.seeds.len();
    let results = map_indexed(mode, cells.len() * n_seeds, |k| {
        let (preset, wd) = &cells[k / n_seeds];
        let seed = cfg.seeds[k % n_seeds];
        let mut cell_cfg = cfg.clone();
        cell_cfg.grid = None;
        cell_cfg.optimizer = OptimizerConfig {
            preset: preset.clone(),
            weight_decay: *wd,
            ..cfg.optimizer.clone()
        };
        let dir = out.as_ref().map(|d| d.join(format!("{preset}_wd{wd}")));
        run_seed(&cell_cfg, seed, dir.as_deref(), None).map(|o| o.final_test.accuracy)
    });
    let mut summary = Vec::new();
    for (ci, (preset, wd)) in cells.iter().enumerate() {
        let runs = &results[ci * n_seeds..(ci + 1) * n_seeds];
        let accs: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.as_ref().ok().copied())
            .collect();
        for err in runs.iter().filter_map(|r| r.as_ref().err()) {
            log::warn!("grid cell {preset} wd={wd}: {err}");
        }
        let (mean, var) = if accs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_var(&accs)
        };
        summary.push(GridCell {
            preset: preset.to_string(),
            weight_decay: *wd,
            runs: runs.len(),
            failed: runs.len() - accs.len(),
            mean_test_acc: mean,
            std_test_acc: if accs.len() > 1 {
                var.sqrt()
            } else if accs.is_empty() {
                f64::NAN
            } else {
                0.0
            },
            test_accs: accs,
        });
    }
    if let Some(d) = &out {
        let mut buf = Vec::new();
        write_grid_csv(&summary, &mut buf)?;
        write_atomic(&d.join("grid.csv"), &buf)?;
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegretAudit {
    /// `mean_t L(theta_t) - L*` over absorbed snapshots.
    pub avg_regret: f64,
    /// `L(theta_avg) - L*`.
    pub final_gap: f64,
    /// Standard error of the snapshot-loss mean.
    pub std_error: f64,
    pub snapshots: usize,
    pub pass: bool,
}

/// Checks `L(theta_avg) - L* <= mean_t (L(theta_t) - L*) + 2 SE` with `L`
/// the unregularised training loss. Returns `None` (with a warning) on
/// non-convex tasks or runs without averaging.
pub fn regret_audit(outcome: &RunOutcome, loss_star: f64) -> Option<RegretAudit> {
    if !outcome.convex {
        log::warn!(
            "regret audit skipped for seed {}: task is not convex",
            outcome.seed
        );
        return None;
    }
    let losses = &outcome.snapshot_losses;
    if !outcome.averaged || losses.is_empty() {
        log::warn!(
            "regret audit skipped for seed {}: no averaged snapshots",
            outcome.seed
        );
        return None;
    }
    let (mean, var) = mean_var(losses);
    let se = if losses.len() > 1 {
        (var / losses.len() as f64).sqrt()
    } else {
        0.0
    };
    let avg_regret = mean - loss_star;
    let final_gap = outcome.final_train.loss - loss_star;
    Some(RegretAudit {
        avg_regret,
        final_gap,
        std_error: se,
        snapshots: losses.len(),
        pass: final_gap <= avg_regret + 2.0 * se + 1e-12 * mean.abs(),
    })
}

/// Long full-batch Adam run from `start`; returns the lowest unregularised
/// training loss seen, used as `L*`.
pub fn reference_loss(
    model: &TaskModel,
    data: &DataBatch,
    start: &ParamVector,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let mut m = model.clone();
    m.mode = Mode::Eval;
    m.theta = start.clone();
    let mut opt = Optimizer::build(&OptimizerConfig::new(Preset::Adam, 0.0), &m.theta)?;
    let mut best = f64::INFINITY;
    for _ in 0..steps {
        let lg = m.loss_and_grad(data, 0.0)?;
        best = best.min(lg.loss);
        opt.step(&mut m.theta, &lg.grad, lr)?;
    }
    Ok(best.min(m.loss_and_grad(data, 0.0)?.loss))
}
