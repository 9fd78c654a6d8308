use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcrp_core::relprop::zplus_conv;
use mcrp_core::tensor::conv2d;
use mcrp_core::{fixtures, run_mcrp, SamplingConfig, Tensor};

fn conv_inputs(c: usize, hw: usize, k: usize) -> (Tensor, Tensor) {
    let x = Tensor::from_fn(&[c, hw, hw], |i| ((i * 7919) % 97) as f32 / 97.0);
    let w = Tensor::from_fn(&[k, c, 3, 3], |i| ((i * 104_729) % 89) as f32 / 44.5 - 1.0);
    (x, w)
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for hw in [16, 32, 64] {
        let (x, w) = conv_inputs(8, hw, 8);
        group.bench_with_input(BenchmarkId::from_parameter(hw), &hw, |b, _| {
            b.iter(|| conv2d(&x, &w, 1, 1).unwrap())
        });
    }
    group.finish();
}

fn bench_zplus_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("zplus_conv");
    for hw in [16, 32] {
        let (x, w) = conv_inputs(8, hw, 8);
        let r = Tensor::full(&[8, hw, hw], 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(hw), &hw, |b, _| {
            b.iter(|| zplus_conv(&x, &w, 1, 1, None, None, &r, 1e-9).unwrap())
        });
    }
    group.finish();
}

fn bench_mcrp(c: &mut Criterion) {
    let model = fixtures::tiny_cnn();
    let input = fixtures::input_for(&model, 7);
    let mut group = c.benchmark_group("run_mcrp");
    group.sample_size(10);
    for samples in [10, 100] {
        let cfg = SamplingConfig {
            samples,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::new("tiny-cnn", samples), &cfg, |b, cfg| {
            b.iter(|| run_mcrp(&model, &input, cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_zplus_conv, bench_mcrp);
criterion_main!(benches);
