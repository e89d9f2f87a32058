//! Lloyd's k-means with k-means++ seeding.
//!
//! Distances are compared in single precision with ties going to the lower
//! centroid index. Means and distortion are accumulated in double precision in
//! point order, so results are bit-identical for a given seed regardless of the
//! worker count.

use crate::error::{ensure, Result};
use crate::numerics::{l2_sq_unchecked, Matrix, Rng};
use crate::par;

/// Iteration budget used when fitting product-quantization codebooks.
pub const INIT_ITERS: usize = 20;
/// Iteration budget used by the standalone VQ baseline.
pub const VQ_ITERS: usize = 1000;

const ASSIGN_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub centroids: Matrix<f32>,
    pub labels: Vec<u32>,
    /// Mean squared distance from each point to its centroid.
    pub distortion: f64,
    /// Distortion after the initial assignment and after every Lloyd step.
    pub history: Vec<f64>,
}

impl KmeansResult {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }
}

/// Index of the nearest row of `centroids` (ties to the lower index) and its squared distance.
#[inline]
pub fn nearest(point: &[f32], centroids: &Matrix<f32>) -> (usize, f32) {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for c in 0..centroids.rows() {
        let d = l2_sq_unchecked(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Nearest-centroid labels and squared distances for every point.
pub fn assign_labels(points: &Matrix<f32>, centroids: &Matrix<f32>) -> (Vec<u32>, Vec<f32>) {
    let n = points.rows();
    let chunks = n.div_ceil(ASSIGN_CHUNK);
    let parts = par::map_range(chunks, |c| {
        let lo = c * ASSIGN_CHUNK;
        let hi = (lo + ASSIGN_CHUNK).min(n);
        (lo..hi)
            .map(|i| {
                let (l, d) = nearest(points.row(i), centroids);
                (l as u32, d)
            })
            .collect::<Vec<_>>()
    });
    parts.into_iter().flatten().unzip()
}

fn mean_distortion(dists: &[f32]) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    dists.iter().map(|&d| d as f64).sum::<f64>() / dists.len() as f64
}

/// k-means++ seeding. When `k` exceeds the number of distinct points, each
/// distinct point becomes a centroid and the remaining slots repeat the chosen
/// ones in order.
pub fn kmeanspp_init(points: &Matrix<f32>, k: usize, rng: &mut Rng) -> Result<Matrix<f32>> {
    let n = points.rows();
    ensure!(n >= 1, Argument, "k-means needs at least one point");
    ensure!(k >= 1, Argument, "k-means needs k >= 1");
    let d = points.cols();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.below(n));
    let mut min_d2: Vec<f32> = (0..n)
        .map(|i| l2_sq_unchecked(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = min_d2.iter().map(|&v| v as f64).sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.uniform() * total;
        let mut acc = 0.0f64;
        let mut pick = None;
        for (i, &v) in min_d2.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            acc += v as f64;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total implies a positive weight");
        chosen.push(pick);
        let c = points.row(pick);
        for (i, m) in min_d2.iter_mut().enumerate() {
            let dist = l2_sq_unchecked(points.row(i), c);
            if dist < *m {
                *m = dist;
            }
        }
    }
    let distinct = chosen.len();
    let mut out = Vec::with_capacity(k * d);
    for slot in 0..k {
        out.extend_from_slice(points.row(chosen[slot % distinct]));
    }
    Ok(Matrix::from_raw(k, d, out))
}

/// Runs at most `iters` Lloyd steps from `init`, stopping once labels and
/// centroids are both unchanged. Empty clusters are moved onto the point
/// farthest from its own centroid.
pub fn lloyd(points: &Matrix<f32>, init: &Matrix<f32>, iters: usize) -> Result<KmeansResult> {
    ensure!(init.rows() >= 1, Argument, "k-means needs k >= 1");
    ensure!(
        init.cols() == points.cols(),
        Shape,
        "centroid dimension {} does not match point dimension {}",
        init.cols(),
        points.cols()
    );
    let (n, d, k) = (points.rows(), points.cols(), init.rows());
    let mut centroids = init.clone();
    let (mut labels, dists) = assign_labels(points, &centroids);
    let mut history = vec![mean_distortion(&dists)];

    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let l = labels[i] as usize;
            counts[l] += 1;
            for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in next.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = (s * inv) as f32;
                }
            }
        }
        if counts.contains(&0) && n > 0 {
            let mut own: Vec<f32> = (0..n)
                .map(|i| l2_sq_unchecked(points.row(i), next.row(labels[i] as usize)))
                .collect();
            for c in (0..k).filter(|&c| counts[c] == 0) {
                let mut far = 0;
                for i in 1..n {
                    if own[i] > own[far] {
                        far = i;
                    }
                }
                next.row_mut(c).copy_from_slice(points.row(far));
                own[far] = f32::NEG_INFINITY;
            }
        }
        let (new_labels, dists) = assign_labels(points, &next);
        history.push(mean_distortion(&dists));
        let stable = new_labels == labels && next == centroids;
        centroids = next;
        labels = new_labels;
        if stable {
            break;
        }
    }
    let distortion = *history.last().expect("history is never empty");
    Ok(KmeansResult {
        centroids,
        labels,
        distortion,
        history,
    })
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: &Matrix<f32>, k: usize, iters: usize, rng: &mut Rng) -> Result<KmeansResult> {
    let init = kmeanspp_init(points, k, rng)?;
    lloyd(points, &init, iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian;

    fn pts(v: &[[f32; 2]]) -> Matrix<f32> {
        Matrix::from_vec(v.len(), 2, v.iter().flatten().copied().collect()).unwrap()
    }

    fn sorted_rows(m: &Matrix<f32>) -> Vec<Vec<f32>> {
        let mut rows: Vec<Vec<f32>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    #[test]
    fn init_rejects_empty_arguments() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(kmeanspp_init(&p, 0, &mut Rng::new(0)).is_err());
        let empty = Matrix::<f32>::zeros(0, 2);
        assert!(kmeanspp_init(&empty, 2, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn init_single_point_fills_every_slot() {
        let p = pts(&[[1.5, -2.0]]);
        let c = kmeanspp_init(&p, 5, &mut Rng::new(1)).unwrap();
        for r in 0..5 {
            assert_eq!(c.row(r), &[1.5, -2.0]);
        }
    }

    #[test]
    fn init_exact_cover() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [-4.0, 2.0]]);
        for seed in 0..20 {
            let c = kmeanspp_init(&p, 4, &mut Rng::new(seed)).unwrap();
            assert_eq!(sorted_rows(&c), sorted_rows(&p));
        }
    }

    #[test]
    fn init_blobs_get_one_centroid_each() {
        let mut rng = Rng::new(9);
        let mut v = Vec::new();
        for i in 0..200 {
            let (cx, cy) = if i % 2 == 0 { (-5.0, -5.0) } else { (5.0, 5.0) };
            let g = gaussian(&mut rng, 2);
            v.push([cx + 0.3 * g[0], cy + 0.3 * g[1]]);
        }
        let p = pts(&v);
        let bbox = |blob: usize| {
            let members: Vec<_> = v.iter().skip(blob).step_by(2).collect();
            let lo = [
                members.iter().map(|q| q[0]).fold(f32::INFINITY, f32::min),
                members.iter().map(|q| q[1]).fold(f32::INFINITY, f32::min),
            ];
            let hi = [
                members.iter().map(|q| q[0]).fold(f32::NEG_INFINITY, f32::max),
                members.iter().map(|q| q[1]).fold(f32::NEG_INFINITY, f32::max),
            ];
            (lo, hi)
        };
        let inside = |c: &[f32], (lo, hi): ([f32; 2], [f32; 2])| {
            c[0] >= lo[0] && c[0] <= hi[0] && c[1] >= lo[1] && c[1] <= hi[1]
        };
        for seed in 0..10 {
            let c = kmeanspp_init(&p, 2, &mut Rng::new(seed)).unwrap();
            let a = inside(c.row(0), bbox(0)) && inside(c.row(1), bbox(1));
            let b = inside(c.row(0), bbox(1)) && inside(c.row(1), bbox(0));
            assert!(a || b, "seed {seed}: {:?}", c);
        }
    }

    #[test]
    fn lloyd_duplicate_clusters() {
        let p = pts(&[[0.0, 0.0], [0.0, 0.0], [10.0, 10.0], [10.0, 10.0]]);
        let r = kmeans(&p, 2, 100, &mut Rng::new(4)).unwrap();
        assert_eq!(
            sorted_rows(&r.centroids),
            vec![vec![0.0, 0.0], vec![10.0, 10.0]]
        );
        assert_eq!(r.distortion, 0.0);
    }

    #[test]
    fn lloyd_single_cluster_is_mean() {
        let p = pts(&[[1.0, 2.0], [3.0, -2.0], [5.0, 6.0]]);
        let r = kmeans(&p, 1, 10, &mut Rng::new(0)).unwrap();
        assert_eq!(r.centroids.row(0), &[3.0, 2.0]);
    }

    #[test]
    fn lloyd_zero_iterations_only_assigns() {
        let p = pts(&[[0.0, 0.0], [1.0, 1.0]]);
        let init = pts(&[[0.0, 0.0]]);
        let r = lloyd(&p, &init, 0).unwrap();
        assert_eq!(r.centroids, init);
        assert_eq!(r.iterations(), 0);
        assert_eq!(r.distortion, 1.0);
    }

    #[test]
    fn lloyd_rejects_dimension_mismatch() {
        let p = pts(&[[0.0, 0.0]]);
        let init = Matrix::from_vec(1, 3, vec![0.0f32; 3]).unwrap();
        assert!(lloyd(&p, &init, 3).is_err());
    }

    #[test]
    fn empty_cluster_is_repaired() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [9.0, 0.0]]);
        // Second centroid is so far away it never wins a point.
        let init = pts(&[[0.0, 0.0], [100.0, 100.0]]);
        let r = lloyd(&p, &init, 10).unwrap();
        let mut labels = r.labels.clone();
        labels.sort();
        labels.dedup();
        assert_eq!(labels, vec![0, 1]);
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn one_dimensional_optimum_matches_enumeration() {
        let vals = [0.3f32, 1.1, 1.4, 4.0, 4.2, 7.9];
        let p = Matrix::from_vec(6, 1, vals.to_vec()).unwrap();
        // Best contiguous split of the sorted values.
        let mut best = f64::INFINITY;
        for split in 1..6 {
            let cost = |s: &[f32]| {
                let m = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
                s.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
            };
            best = best.min((cost(&vals[..split]) + cost(&vals[split..])) / 6.0);
        }
        let mut found = f64::INFINITY;
        for seed in 0..8 {
            let r = kmeans(&p, 2, 100, &mut Rng::new(seed)).unwrap();
            found = found.min(r.distortion);
        }
        assert!((found - best).abs() < 1e-6, "{found} vs {best}");
    }
}
