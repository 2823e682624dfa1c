use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use duq_core::baselines::ensemble_decompose;
use duq_core::diff::{Mode, NetBuilder, ParamStore, RngStream};
use duq_core::metrics::{ece_dense, pavpu, DEFAULT_PATCH};
use duq_core::synth::{generate_sample, BenchConfig, Split};
use duq_core::trainer::{TrainConfig, TrainState};
use duq_core::{Shape3, Tensor, TensorMap};

fn unit_map(rng: &mut RngStream, n: usize) -> TensorMap {
    TensorMap::from_fn(1, n, n, |_, _, _| rng.uniform())
}

fn conv(c: &mut Criterion) {
    let mut rng = RngStream::new(1, 0);
    let mut store = ParamStore::new("b");
    let s = Shape3::new(16, 32, 32);
    let net = NetBuilder::new("conv", s)
        .conv(32, 3, 1)
        .leaky_relu()
        .build(&mut store, &mut rng)
        .unwrap();
    let x = Tensor::from_vec(8, s, rng.normal_vec(8 * s.numel())).unwrap();
    c.bench_function("conv3x3 16->32 32x32 batch 8 forward", |b| {
        b.iter(|| net.forward(&store, black_box(&x), Mode::Train).unwrap())
    });
    let (y, cache) = net.forward(&store, &x, Mode::Train).unwrap();
    c.bench_function("conv3x3 16->32 32x32 batch 8 backward", |b| {
        b.iter(|| {
            let mut g = store.zero_grads();
            net.backward(&store, &cache, black_box(&y), Some(&mut g))
                .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = RngStream::new(2, 0);
    let s = unit_map(&mut rng, 32);
    let y = s.map(|v| if v > 0.4 { 1.0 } else { 0.0 }).unwrap();
    let u = unit_map(&mut rng, 32);
    c.bench_function("ece_dense 32x32", |b| {
        b.iter(|| ece_dense(black_box(&s), &y).unwrap())
    });
    c.bench_function("pavpu 32x32", |b| {
        b.iter(|| pavpu(black_box(&s), &y, &u, DEFAULT_PATCH).unwrap())
    });
    let samples: Vec<TensorMap> = (0..10).map(|_| unit_map(&mut rng, 32)).collect();
    c.bench_function("ensemble_decompose 10x32x32", |b| {
        b.iter(|| ensemble_decompose(black_box(&samples)).unwrap())
    });
}

fn single_pass_eval(c: &mut Criterion) {
    let state = TrainState::new(&TrainConfig::default(), 32).unwrap();
    let sample = generate_sample(&BenchConfig::default(), Split::TestId, 0).unwrap();
    c.bench_function("full model single-pass eval 32x32", |b| {
        b.iter(|| state.evaluate_sample(black_box(&sample)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, metrics, single_pass_eval
}
criterion_main!(benches);
