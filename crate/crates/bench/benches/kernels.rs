use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xsep_bench::{filter, network_case, plane};
use xsep_core::loss::{exclusion_loss, ExclusionOptions, LossWeights};
use xsep_core::net::Architecture;
use xsep_core::patch::PatchGrid;
use xsep_core::sparse_model::{parallel_prox, ThresholdMode};
use xsep_core::tensor::{adjoint_conv2d, conv2d_same};
use xsep_core::train::{patch_loss_and_grad, TrainConfig};
use xsep_core::WaveletBank;

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_same");
    for size in [16, 50, 100] {
        let x = plane(size, size, 1);
        let a = filter(5, 2);
        group.bench_with_input(BenchmarkId::new("forward", size), &size, |b, _| b.iter(|| conv2d_same(black_box(&x), black_box(&a)).unwrap()));
        group.bench_with_input(BenchmarkId::new("adjoint", size), &size, |b, _| b.iter(|| adjoint_conv2d(black_box(&x), black_box(&a)).unwrap()));
    }
    group.finish();
}

fn transforms(c: &mut Criterion) {
    let x = plane(50, 50, 3);
    let pivot = plane(50, 50, 4);
    let bank = WaveletBank::new(4, 50, 50).unwrap();
    c.bench_function("parallel_prox 50x50 I=4", |b| b.iter(|| parallel_prox(&[0.1; 4], black_box(&pivot), black_box(&x), &bank, ThresholdMode::Elementwise).unwrap()));
    let y = plane(50, 50, 5);
    c.bench_function("exclusion_loss 50x50", |b| b.iter(|| exclusion_loss(black_box(&x), black_box(&y)).unwrap()));
}

fn patches(c: &mut Criterion) {
    let image = plane(200, 200, 6);
    let grid = PatchGrid::new(200, 200, 50, 45).unwrap();
    let extracted = grid.extract(&image).unwrap();
    c.bench_function("extract 200x200 p50 o45", |b| b.iter(|| grid.extract(black_box(&image)).unwrap()));
    c.bench_function("reassemble 200x200 p50 o45", |b| b.iter(|| grid.reassemble(black_box(&extracted)).unwrap()));
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("patch_loss_and_grad");
    group.sample_size(10);
    for (channels, depth) in [(4, 3), (16, 5)] {
        let arch = Architecture { channels, transforms: 4, depth, filter_size: 5 };
        let cfg = TrainConfig { arch, ..TrainConfig::default() };
        let net = cfg.network().unwrap();
        let (sample, params) = network_case(arch, cfg.patch_size, 7);
        group.bench_function(BenchmarkId::from_parameter(arch), |b| {
            b.iter(|| patch_loss_and_grad(&net, &params, black_box(&sample), LossWeights::default(), ExclusionOptions::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, transforms, patches, network);
criterion_main!(benches);
