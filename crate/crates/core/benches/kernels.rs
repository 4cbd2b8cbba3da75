use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use layersep::data::Pools;
use layersep::kernels::{conv2d, conv2d_input_grad, conv2d_weight_grad, ConvCfg};
use layersep::metrics::{ssim, SsimParams};
use layersep::synth::{render_in_memory, RenderConfig};
use layersep::train::{batch_for_step, train_step, TrainConfig, TrainState};
use layersep::{Exec, Tensor};

fn execs() -> Vec<(&'static str, Exec)> {
    let v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    let v = [v, vec![("parallel", Exec::Parallel)]].concat();
    v
}

fn convolutions(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform([1, 32, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform([64, 32, 4, 4], -0.1, 0.1, &mut rng);
    let cfg = ConvCfg::new(2, 1, 1);
    let y = conv2d(Exec::Sequential, &x, &w, cfg).unwrap();

    let mut group = c.benchmark_group("conv 32x32x32 -> 64, k4 s2");
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::new("forward", name), &exec, |b, &e| {
            b.iter(|| conv2d(e, &x, &w, cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("input grad", name), &exec, |b, &e| {
            b.iter(|| conv2d_input_grad(e, &y, &w, cfg, (32, 32)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("weight grad", name), &exec, |b, &e| {
            b.iter(|| conv2d_weight_grad(e, &x, &y, cfg, (4, 4)).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    use layersep::image::{Image, RangeTag};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut img = || Image::new(128, 128, 3, (0..128 * 128 * 3).map(|_| rng.random()).collect(), RangeTag::Unit).unwrap();
    let (a, b) = (img(), img());
    c.bench_function("ssim 128x128x3", |bench| bench.iter(|| ssim(&a, &b, &SsimParams::default()).unwrap()));
}

fn training(c: &mut Criterion) {
    let rc = RenderConfig {
        image_size: 32,
        n_train: 20,
        n_test: 2,
        size_range: (6, 16),
        ..RenderConfig::default()
    };
    let (train, test) = render_in_memory(&rc, Exec::default()).unwrap();
    let pools = Pools::from_scenes(&train, &test).unwrap();
    let cfg = TrainConfig::default();
    let batch = batch_for_step(&pools, &cfg, 0).unwrap();
    let profile = cfg.resolve_profile(layersep::image::RangeTag::Unit);
    let init = TrainState::init(profile, 2, 0).unwrap();

    let mut group = c.benchmark_group("train step 32x32");
    group.sample_size(10);
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter_batched(
                || init.clone(),
                |mut s| train_step(&mut s, &batch, &cfg, e).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, convolutions, metrics, training);
criterion_main!(benches);
