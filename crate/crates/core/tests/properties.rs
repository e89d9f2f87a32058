use dpq::checkpoint::{from_bytes, to_bytes};
use dpq::diffusion::{strided_timesteps, Denoiser, Schedule};
use dpq::kmeans::{kmeans, nearest};
use dpq::metrics::{size_report, sliced_wasserstein};
use dpq::numerics::{fp16_round, gaussian};
use dpq::pool::{build_pool, compute_importance, pool_capacity, ProjectionRule};
use dpq::quantizers::{pq_assign, pq_fit, reconstruct, vq_assign, vq_fit, Codebook};
use dpq::{compress, CompressedModel, Matrix, Method, ModelMeta, QuantConfig, Rng};
use proptest::prelude::*;

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    Matrix::from_vec(rows, cols, gaussian(&mut Rng::new(seed), rows * cols)).unwrap()
}

/// Index of the smallest distance, ties to the lower index.
fn brute_argmin<C: Codebook>(cb: &C, j: usize, v: &[f32]) -> (usize, f64) {
    (0..cb.codewords())
        .map(|p| (p, sq(cb.centroid(j, p), v)))
        .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pq_assignment_is_termwise_optimal(rows in 1usize..24, groups in 1usize..6, d in 1usize..4, k in 1usize..12, seed in any::<u64>()) {
        let w = random_matrix(rows, groups * d, seed);
        let cb = pq_fit(&w, d, k, 5, &Rng::new(seed ^ 1)).unwrap();
        let a = pq_assign(&w, &cb).unwrap();
        for i in 0..rows {
            for j in 0..groups {
                let v = &w.row(i)[j * d..(j + 1) * d];
                let got = a.get(i, j) as usize;
                let (_, best) = brute_argmin(&cb, j, v);
                prop_assert!(sq(cb.centroid(j, got), v) <= best + 1e-9);
            }
        }
    }

    #[test]
    fn reassigning_a_reconstruction_is_stable(rows in 1usize..16, groups in 1usize..5, d in 1usize..4, k in 1usize..10, seed in any::<u64>()) {
        let w = random_matrix(rows, groups * d, seed);
        let cb = vq_fit(&w, d, k, 10, &Rng::new(seed)).unwrap();
        let a = vq_assign(&w, &cb).unwrap();
        let w_hat = reconstruct(&cb, &a).unwrap();
        let again = vq_assign(&w_hat, &cb).unwrap();
        prop_assert_eq!(reconstruct(&cb, &again).unwrap(), w_hat);
    }

    #[test]
    fn lloyd_never_increases_distortion(n in 1usize..80, dim in 1usize..4, k in 1usize..10, seed in any::<u64>()) {
        let points = random_matrix(n, dim, seed);
        let res = kmeans(&points, k, 30, &mut Rng::new(seed)).unwrap();
        for pair in res.history.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-6) + 1e-9);
        }
        for i in 0..n {
            let (best, dist) = nearest(points.row(i), &res.centroids);
            let own = sq(points.row(i), res.centroids.row(res.labels[i] as usize));
            prop_assert!(best == res.labels[i] as usize || own <= dist as f64 + 1e-6);
        }
    }

    #[test]
    fn pool_respects_capacity_separation_and_projection(rows in 4usize..40, groups in 1usize..8, d in 1usize..4, k in 2usize..16, tau in 0.01f32..0.5, seed in any::<u64>()) {
        let n = groups * d;
        let w = random_matrix(rows, n, seed);
        let cb = pq_fit(&w, d, k, 5, &Rng::new(seed)).unwrap();
        let a = pq_assign(&w, &cb).unwrap();
        let imp = compute_importance(&a, k).unwrap();
        let cap = pool_capacity(rows, n, d).unwrap();
        let (pool, proj) = build_pool(&cb, &imp, tau, cap, ProjectionRule::Nearest).unwrap();
        prop_assert!(pool.len() <= cap.max(1));
        let limit = (tau as f64).powi(2) * d as f64;
        for a_ in 0..pool.phase1_count {
            for b_ in 0..a_ {
                prop_assert!(sq(pool.entry(a_), pool.entry(b_)) >= limit * (1.0 - 1e-4));
            }
        }
        for e in 0..pool.len() {
            for &v in pool.entry(e) {
                prop_assert_eq!(fp16_round(v), v);
            }
        }
        for j in 0..groups {
            for p in 0..k {
                let c = cb.centroid(j, p);
                let best = (0..pool.len()).map(|e| sq(pool.entry(e), c)).fold(f64::INFINITY, f64::min);
                prop_assert!(sq(pool.entry(proj.get(j, p)), c) <= best + 1e-9);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(hidden in 1usize..4, depth in 1usize..4, method in 0usize..5, seed in any::<u64>()) {
        let hidden = hidden * 8;
        let base = CompressedModel {
            meta: ModelMeta::new(&Schedule::default(), seed),
            net: Denoiser::new(hidden, depth, &mut Rng::new(seed)).unwrap(),
        };
        let method = [Method::Float, Method::Uniform, Method::Vq, Method::Pq, Method::Dpq][method];
        let model = if method == Method::Float {
            base
        } else {
            let mut cfg = QuantConfig::preset(method, 2).unwrap();
            cfg.k = 8;
            cfg.iters = Some(3);
            compress(&base, &cfg, &Rng::new(seed)).unwrap()
        };
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes.clone());
        prop_assert_eq!(size_report(&model).unwrap().file_bits(), bytes.len() as u64 * 8);
    }

    #[test]
    fn swd_is_symmetric_and_nonnegative(na in 2usize..64, nb in 2usize..64, seed in any::<u64>()) {
        let a = random_matrix(na, 2, seed);
        let b = random_matrix(nb, 2, seed ^ 7);
        let rng = Rng::new(seed);
        let ab = sliced_wasserstein(&a, &b, 16, &rng).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, &rng).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert!(sliced_wasserstein(&a, &a, 16, &rng).unwrap() < 1e-12);
    }

    #[test]
    fn strided_timesteps_climb_to_total(total in 1usize..2000, steps in 1usize..300) {
        let steps = steps.min(total);
        let ts = strided_timesteps(total, steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(*ts.last().unwrap(), total);
        prop_assert!(ts.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(ts[0] >= 1);
    }

    #[test]
    fn fp16_rounding_is_idempotent(x in -70000.0f32..70000.0) {
        let r = fp16_round(x);
        prop_assert_eq!(fp16_round(r), r);
        prop_assert!(r.abs() <= 65504.0);
    }
}
