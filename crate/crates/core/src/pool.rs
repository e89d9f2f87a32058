//! Folding per-subspace PQ codebooks into one shared pool of half-precision
//! vectors plus a 16-bit projection table.
//!
//! Pool construction is greedy: centroids are visited by decreasing importance
//! (how many sub-vectors are assigned to them); a centroid joins the pool while
//! it is at least `tau` away from every entry already there. Leftover capacity is
//! filled by importance alone. Distances are normalized as `‖a − b‖₂ / √d`.

use crate::error::{ensure, Result};
use crate::numerics::{fp16_round, l2_sq_unchecked, Matrix};
use crate::par;
use crate::quantizers::{check_layout, AssignmentGrid, Codebook, PqCodebook};

/// Upper bound on pool entries addressable by the 16-bit projection table.
pub const MAX_POOL_ENTRIES: usize = 1 << 16;

/// Default merge threshold.
pub const DEFAULT_TAU: f32 = 0.05;

/// Pool size budget `⌊mn / 16d²⌋` (at least one entry).
pub fn pool_capacity(m: usize, n: usize, d: usize) -> Result<usize> {
    ensure!(d >= 1 && n.is_multiple_of(d), Argument, "sub-vector dimension {d} does not divide {n}");
    let cap = ((m * n) / (16 * d * d)).max(1);
    ensure!(
        cap <= MAX_POOL_ENTRIES,
        Capacity,
        "pool of {cap} entries exceeds the 16-bit projection range"
    );
    Ok(cap)
}

/// Assignment counts per `(subspace, codeword)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Importance {
    pub subspaces: usize,
    pub k: usize,
    pub counts: Vec<u32>,
}

impl Importance {
    pub fn get(&self, j: usize, p: usize) -> u32 {
        self.counts[j * self.k + p]
    }
}

pub fn compute_importance(a: &AssignmentGrid, k: usize) -> Result<Importance> {
    if let Some(max) = a.max_index() {
        ensure!(max < k, Corruption, "assignment index {max} exceeds codebook size {k}");
    }
    let mut counts = vec![0u32; a.subspaces * k];
    for i in 0..a.rows {
        for j in 0..a.subspaces {
            counts[j * k + a.get(i, j)] += 1;
        }
    }
    Ok(Importance {
        subspaces: a.subspaces,
        k,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookPool {
    pub d: usize,
    pub capacity: usize,
    /// `len() x d` half-precision values, stored widened to f32.
    pub entries: Vec<f32>,
    /// The first `phase1_count` entries passed the separation test.
    pub phase1_count: usize,
    /// Importance of the centroid each entry was taken from.
    pub entry_importance: Vec<u32>,
}

impl CodebookPool {
    pub fn len(&self) -> usize {
        self.entries.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn entry(&self, e: usize) -> &[f32] {
        &self.entries[e * self.d..(e + 1) * self.d]
    }

    pub fn entry_mut(&mut self, e: usize) -> &mut [f32] {
        &mut self.entries[e * self.d..(e + 1) * self.d]
    }

    pub fn as_matrix(&self) -> Matrix<f32> {
        Matrix::from_raw(self.len(), self.d, self.entries.clone())
    }
}

/// Maps each original `(subspace, codeword)` to a pool entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projection {
    pub subspaces: usize,
    pub k: usize,
    pub table: Vec<u16>,
}

impl Projection {
    #[inline]
    pub fn get(&self, j: usize, p: usize) -> usize {
        self.table[j * self.k + p] as usize
    }
}

/// How original centroids are mapped onto pool entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProjectionRule {
    /// Nearest pool entry.
    #[default]
    Nearest,
    /// Among entries within `tau`, the one taken from the most important
    /// centroid; falls back to the nearest entry when none is that close.
    ImportanceGap,
}

/// Pool entry closest to `v` (ties to the lower index).
pub fn nearest_entry(pool: &CodebookPool, v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for e in 0..pool.len() {
        let dist = l2_sq_unchecked(v, pool.entry(e));
        if dist < best_d {
            best_d = dist;
            best = e;
        }
    }
    best
}

#[inline]
fn normalized_sq_threshold(tau: f32, d: usize) -> f32 {
    tau * tau * d as f32
}

fn project(pool: &CodebookPool, v: &[f32], tau: f32, rule: ProjectionRule) -> usize {
    match rule {
        ProjectionRule::Nearest => nearest_entry(pool, v),
        ProjectionRule::ImportanceGap => {
            let limit = normalized_sq_threshold(tau, pool.d);
            let mut best: Option<(u32, f32, usize)> = None;
            for e in 0..pool.len() {
                let dist = l2_sq_unchecked(v, pool.entry(e));
                if dist >= limit {
                    continue;
                }
                let imp = pool.entry_importance[e];
                let better = match best {
                    None => true,
                    Some((bi, bd, _)) => imp > bi || (imp == bi && dist < bd),
                };
                if better {
                    best = Some((imp, dist, e));
                }
            }
            best.map_or_else(|| nearest_entry(pool, v), |(_, _, e)| e)
        }
    }
}

/// Greedy pool construction followed by projection of every centroid.
pub fn build_pool(
    cb: &PqCodebook,
    imp: &Importance,
    tau: f32,
    capacity: usize,
    rule: ProjectionRule,
) -> Result<(CodebookPool, Projection)> {
    ensure!(tau > 0.0, Argument, "tau must be positive, got {tau}");
    ensure!(capacity >= 1, Argument, "pool capacity must be at least 1");
    ensure!(
        capacity <= MAX_POOL_ENTRIES,
        Capacity,
        "pool of {capacity} entries exceeds the 16-bit projection range"
    );
    ensure!(
        imp.subspaces == cb.subspaces && imp.k == cb.k,
        Shape,
        "importance table does not match codebook"
    );
    let d = cb.d;
    let total = cb.subspaces * cb.k;
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by_key(|&idx| std::cmp::Reverse(imp.counts[idx]));

    let rounded: Vec<f32> = cb.centroids.iter().map(|&v| fp16_round(v)).collect();
    let candidate = |idx: usize| &rounded[idx * d..(idx + 1) * d];
    let limit = normalized_sq_threshold(tau, d);

    let mut pool = CodebookPool {
        d,
        capacity,
        entries: Vec::with_capacity(capacity.min(total) * d),
        phase1_count: 0,
        entry_importance: Vec::new(),
    };
    let mut taken = vec![false; total];
    for &idx in &order {
        if pool.len() == capacity {
            break;
        }
        let c = candidate(idx);
        let separated = (0..pool.len()).all(|e| l2_sq_unchecked(c, pool.entry(e)) >= limit);
        if separated {
            pool.entries.extend_from_slice(c);
            pool.entry_importance.push(imp.counts[idx]);
            taken[idx] = true;
        }
    }
    pool.phase1_count = pool.len();
    for &idx in &order {
        if pool.len() == capacity {
            break;
        }
        if !taken[idx] {
            pool.entries.extend_from_slice(candidate(idx));
            pool.entry_importance.push(imp.counts[idx]);
            taken[idx] = true;
        }
    }

    let rows = par::map_range(cb.subspaces, |j| {
        (0..cb.k)
            .map(|p| project(&pool, cb.centroid(j, p), tau, rule) as u16)
            .collect::<Vec<u16>>()
    });
    let projection = Projection {
        subspaces: cb.subspaces,
        k: cb.k,
        table: rows.concat(),
    };
    Ok((pool, projection))
}

/// PQ codebook view where codeword `p` of subspace `j` is the pool entry it projects to.
#[derive(Clone, Copy, Debug)]
pub struct PooledCodebook<'a> {
    pub pool: &'a CodebookPool,
    pub projection: &'a Projection,
}

impl Codebook for PooledCodebook<'_> {
    fn dim(&self) -> usize {
        self.pool.d
    }
    fn codewords(&self) -> usize {
        self.projection.k
    }
    fn centroid(&self, j: usize, p: usize) -> &[f32] {
        self.pool.entry(self.projection.get(j, p))
    }
}

pub(crate) fn validate_pooled(pool: &CodebookPool, proj: &Projection, a: &AssignmentGrid) -> Result<()> {
    check_layout(a.subspaces * pool.d, pool.d, proj.k)?;
    ensure!(
        proj.subspaces == a.subspaces,
        Shape,
        "projection covers {} subspaces, assignments {}",
        proj.subspaces,
        a.subspaces
    );
    ensure!(
        proj.table.len() == proj.subspaces * proj.k,
        Corruption,
        "projection table has {} entries",
        proj.table.len()
    );
    if let Some(&max) = proj.table.iter().max() {
        ensure!(
            (max as usize) < pool.len(),
            Corruption,
            "projection index {max} exceeds pool size {}",
            pool.len()
        );
    }
    if let Some(max) = a.max_index() {
        ensure!(max < proj.k, Corruption, "assignment index {max} exceeds codebook size {}", proj.k);
    }
    Ok(())
}

pub fn pooled_reconstruct(pool: &CodebookPool, proj: &Projection, a: &AssignmentGrid) -> Result<Matrix<f32>> {
    validate_pooled(pool, proj, a)?;
    crate::quantizers::reconstruct(&PooledCodebook { pool, projection: proj }, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::{fp16_round, gaussian, Rng};
    use crate::quantizers::{pq_assign, pq_fit, reconstruct};

    #[test]
    fn capacity_formula() {
        assert_eq!(pool_capacity(1152, 1152, 4).unwrap(), 5184);
        assert_eq!(pool_capacity(192, 192, 8).unwrap(), 36);
        assert_eq!(pool_capacity(192, 192, 2).unwrap(), 576);
        assert_eq!(pool_capacity(2, 2, 2).unwrap(), 1);
        assert!(matches!(pool_capacity(4096, 4096, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn importance_histograms() {
        let a = AssignmentGrid { rows: 3, subspaces: 2, indices: vec![0; 6] };
        let imp = compute_importance(&a, 4).unwrap();
        assert_eq!(&imp.counts[..4], &[3, 0, 0, 0]);
        let a = AssignmentGrid { rows: 4, subspaces: 1, indices: vec![0, 1, 2, 3] };
        assert_eq!(compute_importance(&a, 4).unwrap().counts, vec![1, 1, 1, 1]);
        assert!(compute_importance(&a, 3).is_err());
    }

    fn codebook(vals: &[[f32; 2]], subspaces: usize) -> PqCodebook {
        PqCodebook {
            d: 2,
            k: vals.len() / subspaces,
            subspaces,
            centroids: vals.iter().flatten().copied().collect(),
        }
    }

    #[test]
    fn no_merge_regime_is_bijective() {
        let cb = codebook(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], 2);
        let imp = Importance { subspaces: 2, k: 2, counts: vec![4, 3, 2, 1] };
        let (pool, proj) = build_pool(&cb, &imp, 0.05, 8, ProjectionRule::Nearest).unwrap();
        assert_eq!(pool.len(), 4);
        assert_eq!(pool.phase1_count, 4);
        let mut seen = proj.table.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        let a = AssignmentGrid { rows: 2, subspaces: 2, indices: vec![0, 1, 1, 0] };
        let pooled = pooled_reconstruct(&pool, &proj, &a).unwrap();
        let plain = reconstruct(&cb, &a).unwrap().map(fp16_round);
        assert_eq!(pooled, plain);
    }

    #[test]
    fn duplicate_keeps_more_important_copy() {
        let cb = codebook(&[[0.3, 0.3], [2.0, 2.0], [0.3, 0.3], [5.0, 5.0]], 2);
        let imp = Importance { subspaces: 2, k: 2, counts: vec![3, 1, 5, 0] };
        let (pool, proj) = build_pool(&cb, &imp, 0.05, 3, ProjectionRule::Nearest).unwrap();
        assert_eq!(pool.phase1_count, 3);
        // The importance-5 copy (subspace 1) enters first.
        assert_eq!(pool.entry_importance[0], 5);
        assert_eq!(proj.get(0, 0), 0);
        assert_eq!(proj.get(1, 0), 0);
    }

    #[test]
    fn phase_two_fills_remaining_capacity() {
        let cb = codebook(&[[0.0, 0.0], [0.01, 0.0], [0.0, 0.01], [3.0, 3.0]], 1);
        let imp = Importance { subspaces: 1, k: 4, counts: vec![4, 3, 2, 1] };
        let (pool, _) = build_pool(&cb, &imp, 0.05, 3, ProjectionRule::Nearest).unwrap();
        assert_eq!(pool.phase1_count, 2);
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.entry(1), &[fp16_round(3.0), fp16_round(3.0)]);
        assert_eq!(pool.entry_importance, vec![4, 1, 3]);
    }

    #[test]
    fn importance_gap_prefers_popular_entry() {
        let pool = CodebookPool {
            d: 1,
            capacity: 2,
            entries: vec![0.0, 0.06],
            phase1_count: 2,
            entry_importance: vec![1, 9],
        };
        // 0.02 is nearer to entry 0 but both lie within tau = 0.1.
        assert_eq!(project(&pool, &[0.02], 0.1, ProjectionRule::Nearest), 0);
        assert_eq!(project(&pool, &[0.02], 0.1, ProjectionRule::ImportanceGap), 1);
        // Nothing within tau: falls back to nearest.
        assert_eq!(project(&pool, &[-5.0], 0.1, ProjectionRule::ImportanceGap), 0);
    }

    #[test]
    fn projection_matches_brute_force() {
        let mut rng = Rng::new(17);
        let w = Matrix::from_vec(24, 16, gaussian(&mut rng, 24 * 16).iter().map(|v| v * 0.1).collect()).unwrap();
        let cb = pq_fit(&w, 4, 8, 20, &rng).unwrap();
        let a = pq_assign(&w, &cb).unwrap();
        let imp = compute_importance(&a, 8).unwrap();
        let (pool, proj) = build_pool(&cb, &imp, 0.05, 6, ProjectionRule::Nearest).unwrap();
        assert!(pool.len() <= 6);
        for j in 0..cb.subspaces {
            for p in 0..cb.k {
                let c = cb.centroid(j, p);
                let dists: Vec<f64> = (0..pool.len())
                    .map(|e| {
                        c.iter()
                            .zip(pool.entry(e))
                            .map(|(x, y)| ((x - y) as f64).powi(2))
                            .sum::<f64>()
                    })
                    .collect();
                let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let e = proj.get(j, p);
                assert!(dists[e] <= best + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_pool_gives_identical_blocks() {
        let pool = CodebookPool {
            d: 2,
            capacity: 1,
            entries: vec![0.5, -0.25],
            phase1_count: 1,
            entry_importance: vec![1],
        };
        let proj = Projection { subspaces: 2, k: 3, table: vec![0; 6] };
        let a = AssignmentGrid { rows: 2, subspaces: 2, indices: vec![0, 1, 2, 1] };
        let w = pooled_reconstruct(&pool, &proj, &a).unwrap();
        assert!(w.data().chunks(2).all(|c| c == [0.5, -0.25]));
        let bad = Projection { subspaces: 2, k: 3, table: vec![0, 0, 0, 0, 0, 1] };
        assert!(matches!(pooled_reconstruct(&pool, &bad, &a), Err(Error::Corruption(_))));
    }

    #[test]
    fn rejects_bad_arguments() {
        let cb = codebook(&[[0.0, 0.0]], 1);
        let imp = Importance { subspaces: 1, k: 1, counts: vec![1] };
        assert!(build_pool(&cb, &imp, 0.0, 1, ProjectionRule::Nearest).is_err());
        assert!(build_pool(&cb, &imp, 0.05, 0, ProjectionRule::Nearest).is_err());
        assert!(matches!(
            build_pool(&cb, &imp, 0.05, MAX_POOL_ENTRIES + 1, ProjectionRule::Nearest),
            Err(Error::Capacity(_))
        ));
    }
}
