//! Sequential versus data-parallel execution of the hot loops: dataset
//! generation, per-scene evaluation and the finite-difference sweep.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use trajgraft::config::Config;
use trajgraft::harness::{default_grad_check, evaluate_with, gradcheck_config};
use trajgraft::model::Model;
use trajgraft::par::Exec;
use trajgraft::scene::generate_dataset_with;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gen(c: &mut Criterion) {
    let cfg = Config::default();
    let mut group = c.benchmark_group("gen_40_scenes");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset_with(exec, 0, 40, 4, &cfg.data).unwrap())
        });
    }
    group.finish();
}

fn eval(c: &mut Criterion) {
    let cfg = Config::default();
    let scenes = generate_dataset_with(Exec::Parallel, 0, 40, 4, &cfg.data).unwrap();
    let model = Model::new(&cfg.train, &cfg.data).unwrap();
    let mut group = c.benchmark_group("eval_40_scenes");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(&model, &scenes, &[1, 6], exec).unwrap())
        });
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let cfg = gradcheck_config();
    let mut group = c.benchmark_group("gradcheck_tiny");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| default_grad_check(&cfg, 0, 1, 1e-4, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gen, eval, gradcheck);
criterion_main!(benches);
