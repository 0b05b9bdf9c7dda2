use candle_core::Var;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use frontal_bench::{flow, image};
use frontal_core::gfilter::{guided_filter_tensor, GuidedFilterParams};
use frontal_core::kernels;

fn warp(c: &mut Criterion) {
    let mut g = c.benchmark_group("warp");
    for size in [32usize, 64] {
        let src = image(8, 3, size, size);
        let f = flow(8, size, size, 4.0);
        g.bench_with_input(BenchmarkId::new("forward", size), &size, |b, _| {
            b.iter(|| kernels::warp(black_box(&src), black_box(&f)).unwrap())
        });
        let sv = Var::from_tensor(&src).unwrap();
        let fv = Var::from_tensor(&f).unwrap();
        g.bench_with_input(BenchmarkId::new("backward", size), &size, |b, _| {
            b.iter(|| {
                let y = kernels::warp(sv.as_tensor(), fv.as_tensor()).unwrap();
                y.sum_all().unwrap().backward().unwrap()
            })
        });
    }
    g.finish();
}

fn guided_filter(c: &mut Criterion) {
    let mut g = c.benchmark_group("guided_filter");
    for size in [32usize, 64] {
        let input = image(8, 3, size, size);
        let guide = image(8, 3, size, size).affine(0.8, 0.1).unwrap();
        let p = GuidedFilterParams::for_resolution(size, 1e-2).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| guided_filter_tensor(black_box(&input), black_box(&guide), p).unwrap())
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for ch in [16usize, 64] {
        let x = image(8, ch, 32, 32);
        let w = image(ch, ch, 3, 3).affine(0.1, -0.05).unwrap();
        let bias = image(1, 1, 1, ch).flatten_all().unwrap();
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| kernels::conv2d_bias(black_box(&x), &w, &bias, 1, 1).unwrap())
        });
        let xv = Var::from_tensor(&x).unwrap();
        let wv = Var::from_tensor(&w).unwrap();
        g.bench_with_input(BenchmarkId::new("backward", ch), &ch, |b, _| {
            b.iter(|| {
                let y = kernels::conv2d_bias(xv.as_tensor(), wv.as_tensor(), &bias, 1, 1).unwrap();
                y.sum_all().unwrap().backward().unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, warp, guided_filter, conv);
criterion_main!(benches);
