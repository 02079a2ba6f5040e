//! Parallel versus sequential kernels on a toy-sized training step and a
//! batch prediction. Both paths compute identical results.

use std::hint::black_box;

use avdgp::config::ModelConfig;
use avdgp::deepmodel::{DgpModel, Noise};
use avdgp::experiment;
use avdgp::par;
use avdgp::rng::Rng;
use avdgp::trainer::loss_and_grads;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const CONFIG: &str = r#"{"task":"binary","dataset":"toy","toy_n":2000,"rule":"AR2P","layers":3,"dims":[2,2],
    "inducing":[32,16,16],"samples":8,"likelihood":"bernoulli_probit","inference_fn":"affine_mlp"}"#;

fn bench(c: &mut Criterion) {
    let cfg = ModelConfig::from_json(CONFIG).unwrap();
    let splits = experiment::prepare(&cfg).unwrap();
    let model = DgpModel::from_config(&cfg, &splits.train.x).unwrap();
    let batch = splits.train.subset(&(0..cfg.batch).collect::<Vec<_>>());
    let y = avdgp::adcore::Tensor::vector(batch.y.clone());
    let n = splits.train.len();

    let mut group = c.benchmark_group("train_step");
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &on| {
            par::set_enabled(on);
            let mut rng = Rng::new(0, 3);
            b.iter(|| {
                black_box(loss_and_grads(&model, &batch.x, &y, n, cfg.samples, Noise::Sample(&mut rng)).unwrap())
            });
        });
    }
    group.finish();

    let mut group = c.benchmark_group("predict_1000");
    let points = splits.test.x.clone();
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &parallel, |b, &on| {
            par::set_enabled(on);
            b.iter(|| black_box(model.predict(&points, 32, &mut Rng::new(0, 6)).unwrap()));
        });
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
