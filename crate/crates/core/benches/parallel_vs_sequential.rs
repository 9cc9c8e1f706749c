use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gavg_core::harness::{grid, RunConfig};
use gavg_core::metrics::{trace_estimate, TaskObjective};
use gavg_core::noisy_quadratic::{simulate, Collect, QuadModel, Simulation};
use gavg_core::tasks::{Mode, TaskSpec};
use gavg_core::{Parallelism, ParamVector, RngStream};

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("rayon", Parallelism::Rayon),
];

fn quadratic(c: &mut Criterion) {
    let model = QuadModel::isotropic(200, 1.0, 0.01).unwrap();
    let w0 = ParamVector::zeros(200);
    let mut g = c.benchmark_group("simulate_quadratic");
    g.sample_size(10);
    for (name, mode) in MODES {
        let sim = Simulation::new(0.5, 1000, 64)
            .collect(Collect::all(0.9))
            .mode(mode);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate(&model, &w0, &sim).unwrap())
        });
    }
    g.finish();
}

fn hutchinson(c: &mut Criterion) {
    let (ds, mut model) = TaskSpec::builtin("blobs_mlp")
        .unwrap()
        .instantiate(0)
        .unwrap();
    model.mode = Mode::Eval;
    let obj = TaskObjective {
        model: &model,
        batch: &ds.train,
        l2: 0.0,
    };
    let rng = RngStream::new(0, 0);
    let mut g = c.benchmark_group("trace_estimate");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trace_estimate(&obj, &model.theta, 16, &rng, None, mode).unwrap())
        });
    }
    g.finish();
}

fn seed_grid(c: &mut Criterion) {
    let cfg = RunConfig::from_json(
        r#"{
        "task": {"kind": "mlp", "hidden": [16], "batch_norm": true,
                 "data": {"source": "blobs", "n": 400, "d": 8, "classes": 4, "sep": 3.0, "label_noise": 0.1}},
        "optimizer": {"preset": "gadam_inner", "weight_decay": 0.0005},
        "schedule": {"kind": "linear_ia", "alpha0": 0.001, "t_avg": 3},
        "averaging": {"start": 3},
        "epochs": 6,
        "batch_size": 32,
        "seeds": [0, 1, 2, 3],
        "grid": {"presets": ["adamw", "gadam_inner"], "weight_decays": [0, 0.0005]}
    }"#,
    )
    .unwrap();
    let mut g = c.benchmark_group("grid");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| grid(&cfg, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, quadratic, hutchinson, seed_grid);
criterion_main!(benches);
