use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gavg_core::harness::{self, write_atomic, Checkpoint, RunConfig};
use gavg_core::metrics::{
    pairwise_diversity, read_snapshot_dir, sharpness_report, DiversityMetric, TaskObjective,
};
use gavg_core::noisy_quadratic::{
    simulate, Collect, LambdaSpec, Preconditioner, QuadModel, Simulation,
};
use gavg_core::tasks::{Mode, TaskSpec};
use gavg_core::{GavgError, Parallelism, ParamVector, Result};

#[derive(Parser)]
#[command(
    name = "gavg",
    version,
    about = "Iterate-averaged optimizer experiments"
)]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config (or one seed, optionally resumed).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Expand seeds x presets x weight decays and summarise test accuracy.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Monte Carlo on the diagonal noisy quadratic.
    SimulateQuadratic {
        #[arg(long)]
        p: usize,
        #[arg(long, default_value = "constant")]
        lambda_spec: LambdaSpec,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        sigma2: f64,
        #[arg(long, default_value_t = 1)]
        batch: u32,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value = "identity")]
        precond: Preconditioner,
        #[arg(long, default_value = "final,ia")]
        collect: Collect,
        /// Initial value of every coordinate.
        #[arg(long, default_value_t = 0.0)]
        w0: f64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean pairwise diversity of a directory of softmax snapshots.
    Diversity {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, default_value = "sym_kl")]
        metric: DiversityMetric,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hessian sharpness of a checkpoint on its training set.
    Curvature {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A run config file or a builtin task name.
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 100)]
        power_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-epoch learning rates of a config's schedule.
    ScheduleDump {
        #[arg(long)]
        config: PathBuf,
    },
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => Ok(io::stdout().write_all(bytes)?),
    }
}

fn load_task(arg: &str) -> Result<TaskSpec> {
    let path = Path::new(arg);
    if path.exists() {
        Ok(RunConfig::load(path)?.task)
    } else {
        TaskSpec::builtin(arg)
    }
}

fn train(
    cfg: &RunConfig,
    seed: Option<u64>,
    resume: Option<&Path>,
    mode: Parallelism,
) -> Result<()> {
    let resume = resume.map(Checkpoint::load).transpose()?;
    let seed = seed.or(resume.as_ref().map(|c| c.seed));
    let outcomes = match seed {
        None => harness::run(cfg, mode)?,
        Some(s) => {
            let out = cfg.resolved_out_dir();
            if let Some(d) = &out {
                fs::create_dir_all(d)?;
                write_atomic(
                    &d.join("config.json"),
                    (cfg.to_json_pretty() + "\n").as_bytes(),
                )?;
            }
            vec![harness::run_seed(cfg, s, out.as_deref(), resume)?]
        }
    };
    println!("seed,epochs,averaged,final_val_acc,final_test_acc,best_val_acc");
    for o in outcomes {
        println!(
            "{},{},{},{},{},{}",
            o.seed,
            o.records.len(),
            u8::from(o.averaged),
            o.final_val.accuracy,
            o.final_test.accuracy,
            1.0 - o.best_val_err.min(1.0)
        );
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mode = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    };
    match cli.command {
        Command::Train {
            config,
            seed,
            resume,
        } => train(&RunConfig::load(&config)?, seed, resume.as_deref(), mode),
        Command::Grid { config } => {
            let cells = harness::grid(&RunConfig::load(&config)?, mode)?;
            harness::write_grid_csv(&cells, io::stdout())
        }
        Command::SimulateQuadratic {
            p,
            lambda_spec,
            alpha,
            sigma2,
            batch,
            steps,
            seeds,
            precond,
            collect,
            w0,
            base_seed,
            out,
        } => {
            let model = QuadModel::new(lambda_spec.build(p)?, sigma2, batch, precond)?;
            let sim = Simulation::new(alpha, steps, seeds)
                .collect(collect)
                .base_seed(base_seed)
                .mode(mode);
            let stats = simulate(&model, &ParamVector::filled(p, w0), &sim)?;
            let mut buf = Vec::new();
            stats.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)
        }
        Command::Diversity {
            snapshots,
            metric,
            out,
        } => {
            let snaps = read_snapshot_dir(&snapshots)?;
            let r = pairwise_diversity(&snaps, metric)?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let text = format!(
                "metric,snapshots,pairs,examples,mean_per_example,mean_dataset_sum,tv_per_example,tv_dataset_sum\n\
                 {},{},{},{},{},{},{},{}\n",
                r.metric,
                r.snapshots,
                r.pairs,
                r.examples,
                r.mean_per_example,
                r.mean_dataset_sum,
                opt(r.tv_per_example),
                opt(r.tv_dataset_sum)
            );
            emit(out.as_deref(), text.as_bytes())
        }
        Command::Curvature {
            checkpoint,
            task,
            probes,
            power_iters,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let spec = load_task(&task)?;
            let (ds, mut model) = spec.instantiate(ck.seed)?;
            if model.num_params() != ck.theta.len() {
                return Err(GavgError::config(format!(
                    "task has {} parameters, checkpoint has {}",
                    model.num_params(),
                    ck.theta.len()
                )));
            }
            model.theta = ck.theta;
            model.bn_running = ck.bn_running;
            model.mode = Mode::Eval;
            let obj = TaskObjective {
                model: &model,
                batch: &ds.train,
                l2: 0.0,
            };
            let report = sharpness_report(&obj, &model.theta, probes, power_iters, seed, mode)?;
            emit(
                out.as_deref(),
                (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
            )
        }
        Command::ScheduleDump { config } => {
            let cfg = RunConfig::load(&config)?;
            let sched = cfg.effective_schedule();
            let mut text = String::from("epoch,lr\n");
            for e in 0..=cfg.epochs {
                text += &format!("{e},{}\n", sched.lr_at(e as f64)?);
            }
            emit(None, text.as_bytes())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
