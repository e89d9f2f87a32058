//! Parallel against single-worker timings of the hot kernels. Build with
//! `--no-default-features` to time the sequential fallback instead; then
//! both series run on the calling thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpq::diffusion::{ddim_sample, Denoiser, Schedule};
use dpq::kmeans::kmeans;
use dpq::metrics::sliced_wasserstein;
use dpq::numerics::{gaussian, matmul};
use dpq::quantizers::{pq_assign, pq_fit};
use dpq::{Matrix, Rng};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    Matrix::from_vec(rows, cols, gaussian(&mut Rng::new(seed), rows * cols)).unwrap()
}

/// Runs `f` on a dedicated pool of `threads` workers.
fn on_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn series() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("parallel", all), ("sequential", 1)]
}

fn bench_kmeans(c: &mut Criterion) {
    let points = random_matrix(4096, 4, 1);
    let mut g = c.benchmark_group("kmeans_4096x4_k256");
    g.sample_size(10);
    for (name, threads) in series() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| on_pool(threads, || kmeans(&points, 256, 20, &mut Rng::new(2)).unwrap()))
        });
    }
    g.finish();
}

fn bench_assign(c: &mut Criterion) {
    let w = random_matrix(384, 384, 3);
    let cb = pq_fit(&w, 4, 256, 5, &Rng::new(4)).unwrap();
    let mut g = c.benchmark_group("pq_assign_384x384_d4");
    for (name, threads) in series() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| on_pool(threads, || pq_assign(&w, &cb).unwrap()))
        });
    }
    g.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let a = random_matrix(384, 384, 5);
    let x = random_matrix(384, 256, 6);
    let mut g = c.benchmark_group("matmul_384x384x256");
    for (name, threads) in series() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| on_pool(threads, || matmul(&a, &x).unwrap()))
        });
    }
    g.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let net = Denoiser::new(96, 3, &mut Rng::new(7)).unwrap().dense().unwrap();
    let s = Schedule::default();
    let mut g = c.benchmark_group("ddim_10_steps_1024_chains");
    g.sample_size(10);
    for (name, threads) in series() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| on_pool(threads, || ddim_sample(&net, &s, 10, 0.0, 1024, &Rng::new(8)).unwrap()))
        });
    }
    g.finish();
}

fn bench_swd(c: &mut Criterion) {
    let a = random_matrix(4096, 2, 9);
    let b = random_matrix(4096, 2, 10);
    let mut g = c.benchmark_group("swd_4096_128_projections");
    for (name, threads) in series() {
        g.bench_function(BenchmarkId::from_parameter(name), |bn| {
            bn.iter(|| on_pool(threads, || sliced_wasserstein(&a, &b, 128, &Rng::new(11)).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_kmeans, bench_assign, bench_matmul, bench_sampling, bench_swd);
criterion_main!(benches);
