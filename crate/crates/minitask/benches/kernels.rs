//! Sequential vs. row-parallel kernel timings. Both arms run inside one
//! binary so criterion's comparisons share a machine state; the `parallel`
//! feature only changes which arm the dispatching wrappers pick, never the
//! numeric results.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use minitask::kernels;
use minitask::rng::{domain, RunRng};
use rand::Rng;
use std::hint::black_box;

fn random_vec(n: usize, tag: u64) -> Vec<f64> {
    let mut rng = RunRng::new(42).stream(domain::INIT, tag, 0);
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &size in &[32usize, 128, 256] {
        let a = random_vec(size * size, 1);
        let b = random_vec(size * size, 2);
        group.bench_with_input(BenchmarkId::new("seq", size), &size, |bench, &s| {
            bench.iter(|| kernels::matmul_seq(black_box(&a), black_box(&b), s, s, s));
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", size), &size, |bench, &s| {
            bench.iter(|| kernels::matmul_par(black_box(&a), black_box(&b), s, s, s));
        });
    }
    group.finish();
}

fn bench_pairwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("pairwise_sq_dists");
    for &n in &[100usize, 500] {
        let d = 32;
        let x = random_vec(n * d, 3);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, &n| {
            bench.iter(|| kernels::pairwise_sq_dists_seq(black_box(&x), n, d));
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, &n| {
            bench.iter(|| kernels::pairwise_sq_dists_par(black_box(&x), n, d));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_pairwise);
criterion_main!(benches);
