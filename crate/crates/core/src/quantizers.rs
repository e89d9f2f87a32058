//! Uniform, vector and product quantizers for dense weight matrices, plus the
//! storage accountant.
//!
//! A row of `W` (m x n) is split into `n / d` contiguous sub-vectors; sub-vector
//! `j` of row `i` covers columns `[j*d, (j+1)*d)`. VQ shares one codebook across
//! all sub-vectors, PQ gives every column group its own.

use crate::error::{ensure, Result};
use crate::kmeans::{kmeans, nearest};
use crate::numerics::{Matrix, Rng};
use crate::par;

/// Largest codebook addressable by 8-bit assignments.
pub const MAX_CODEWORDS: usize = 256;

/// Per-row asymmetric min/max quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformQuant {
    pub bits: u8,
    pub rows: usize,
    pub cols: usize,
    pub scale: Vec<f32>,
    pub zero_point: Vec<f32>,
    pub codes: Vec<u8>,
}

impl UniformQuant {
    pub fn levels(&self) -> usize {
        1 << self.bits
    }

    pub fn dequantize(&self) -> Matrix<f32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            let (s, z) = (self.scale[i], self.zero_point[i]);
            out.extend(
                self.codes[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .map(|&c| s * c as f32 + z),
            );
        }
        Matrix::from_raw(self.rows, self.cols, out)
    }
}

pub fn uniform_quantize(w: &Matrix<f32>, bits: u8) -> Result<UniformQuant> {
    ensure!((1..=8).contains(&bits), Argument, "uniform bits must be in 1..=8, got {bits}");
    let (m, n) = w.shape();
    let top = ((1u32 << bits) - 1) as f32;
    let mut scale = Vec::with_capacity(m);
    let mut zero_point = Vec::with_capacity(m);
    let mut codes = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = w.row(i);
        let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if n == 0 || hi <= lo {
            scale.push(0.0);
            zero_point.push(if n == 0 { 0.0 } else { lo });
            codes.extend(std::iter::repeat_n(0u8, n));
            continue;
        }
        let s = (hi - lo) / top;
        scale.push(s);
        zero_point.push(lo);
        codes.extend(
            row.iter()
                .map(|&v| ((v - lo) / s).round().clamp(0.0, top) as u8),
        );
    }
    Ok(UniformQuant {
        bits,
        rows: m,
        cols: n,
        scale,
        zero_point,
        codes,
    })
}

/// Read access shared by VQ and PQ codebooks.
pub trait Codebook {
    fn dim(&self) -> usize;
    fn codewords(&self) -> usize;
    /// Codeword `p` as seen by column group `j`.
    fn centroid(&self, j: usize, p: usize) -> &[f32];
}

/// One codebook shared by every sub-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VqCodebook {
    pub d: usize,
    /// k x d centroid table.
    pub centroids: Matrix<f32>,
}

impl Codebook for VqCodebook {
    fn dim(&self) -> usize {
        self.d
    }
    fn codewords(&self) -> usize {
        self.centroids.rows()
    }
    fn centroid(&self, _j: usize, p: usize) -> &[f32] {
        self.centroids.row(p)
    }
}

/// Per-subspace codebooks, stored as a flat `subspaces x k x d` table.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    pub d: usize,
    pub k: usize,
    pub subspaces: usize,
    pub centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn subspace(&self, j: usize) -> Matrix<f32> {
        let len = self.k * self.d;
        Matrix::from_raw(self.k, self.d, self.centroids[j * len..(j + 1) * len].to_vec())
    }

    pub fn centroid_mut(&mut self, j: usize, p: usize) -> &mut [f32] {
        let at = (j * self.k + p) * self.d;
        &mut self.centroids[at..at + self.d]
    }
}

impl Codebook for PqCodebook {
    fn dim(&self) -> usize {
        self.d
    }
    fn codewords(&self) -> usize {
        self.k
    }
    fn centroid(&self, j: usize, p: usize) -> &[f32] {
        let at = (j * self.k + p) * self.d;
        &self.centroids[at..at + self.d]
    }
}

/// The quantized weight: one 8-bit codeword index per sub-vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentGrid {
    pub rows: usize,
    pub subspaces: usize,
    pub indices: Vec<u8>,
}

impl AssignmentGrid {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.subspaces + j] as usize
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, p: usize) {
        self.indices[i * self.subspaces + j] = p as u8;
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().max().map(|&v| v as usize)
    }
}

pub(crate) fn check_layout(n: usize, d: usize, k: usize) -> Result<()> {
    ensure!(d >= 1, Argument, "sub-vector dimension must be positive");
    ensure!(n.is_multiple_of(d), Argument, "sub-vector dimension {d} does not divide {n} columns");
    ensure!(k >= 1, Argument, "codebook needs at least one codeword");
    ensure!(
        k <= MAX_CODEWORDS,
        Capacity,
        "{k} codewords do not fit 8-bit assignments"
    );
    Ok(())
}

/// `[j*d, (j+1)*d)` column block of every row, as an m x d matrix.
pub fn column_group(w: &Matrix<f32>, j: usize, d: usize) -> Matrix<f32> {
    let mut out = Vec::with_capacity(w.rows() * d);
    for i in 0..w.rows() {
        out.extend_from_slice(&w.row(i)[j * d..(j + 1) * d]);
    }
    Matrix::from_raw(w.rows(), d, out)
}

/// Fits a shared codebook over all row sub-vectors, using stream `rng.fork(0)`.
pub fn vq_fit(w: &Matrix<f32>, d: usize, k: usize, iters: usize, rng: &Rng) -> Result<VqCodebook> {
    check_layout(w.cols(), d, k)?;
    let points = Matrix::from_raw(w.rows() * w.cols() / d, d, w.data().to_vec());
    let fit = kmeans(&points, k, iters, &mut rng.fork(0))?;
    Ok(VqCodebook {
        d,
        centroids: fit.centroids,
    })
}

/// Fits one codebook per column group; group `j` uses stream `rng.fork(j)`.
pub fn pq_fit(w: &Matrix<f32>, d: usize, k: usize, iters: usize, rng: &Rng) -> Result<PqCodebook> {
    check_layout(w.cols(), d, k)?;
    let subspaces = w.cols() / d;
    let fits = par::map_range(subspaces, |j| {
        kmeans(&column_group(w, j, d), k, iters, &mut rng.fork(j as u64))
    });
    let mut centroids = Vec::with_capacity(subspaces * k * d);
    for fit in fits {
        centroids.extend_from_slice(fit?.centroids.data());
    }
    Ok(PqCodebook {
        d,
        k,
        subspaces,
        centroids,
    })
}

fn assign_with(w: &Matrix<f32>, d: usize, subspaces: usize, pick: impl Fn(usize, &[f32]) -> usize + Sync + Send) -> AssignmentGrid {
    let rows = par::map_range(w.rows(), |i| {
        let row = w.row(i);
        (0..subspaces)
            .map(|j| pick(j, &row[j * d..(j + 1) * d]) as u8)
            .collect::<Vec<u8>>()
    });
    AssignmentGrid {
        rows: w.rows(),
        subspaces,
        indices: rows.concat(),
    }
}

pub fn vq_assign(w: &Matrix<f32>, cb: &VqCodebook) -> Result<AssignmentGrid> {
    check_layout(w.cols(), cb.d, cb.codewords())?;
    Ok(assign_with(w, cb.d, w.cols() / cb.d, |_, sub| {
        nearest(sub, &cb.centroids).0
    }))
}

pub fn pq_assign(w: &Matrix<f32>, cb: &PqCodebook) -> Result<AssignmentGrid> {
    check_layout(w.cols(), cb.d, cb.k)?;
    ensure!(
        w.cols() / cb.d == cb.subspaces,
        Shape,
        "codebook has {} subspaces, weight needs {}",
        cb.subspaces,
        w.cols() / cb.d
    );
    let tables: Vec<Matrix<f32>> = (0..cb.subspaces).map(|j| cb.subspace(j)).collect();
    Ok(assign_with(w, cb.d, cb.subspaces, |j, sub| {
        nearest(sub, &tables[j]).0
    }))
}

/// Rebuilds the dense weight from codewords.
pub fn reconstruct<C: Codebook + ?Sized>(cb: &C, a: &AssignmentGrid) -> Result<Matrix<f32>> {
    let (d, k) = (cb.dim(), cb.codewords());
    if let Some(max) = a.max_index() {
        ensure!(max < k, Corruption, "assignment index {max} exceeds codebook size {k}");
    }
    let mut out = Vec::with_capacity(a.rows * a.subspaces * d);
    for i in 0..a.rows {
        for j in 0..a.subspaces {
            out.extend_from_slice(cb.centroid(j, a.get(i, j)));
        }
    }
    Ok(Matrix::from_raw(a.rows, a.subspaces * d, out))
}

/// `⌈log₂ k⌉`, the theoretical width of one assignment.
pub fn index_bits(k: usize) -> u32 {
    assert!(k >= 1);
    usize::BITS - (k - 1).leading_zeros()
}

/// Codebook layout being accounted for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Vq,
    Pq,
    /// PQ whose codebooks were folded into a pool of `entries` half-precision vectors.
    PqPool { entries: usize },
}

/// Bit accounting for one layer (or an aggregate of layers).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StorageReport {
    /// Assignments at `⌈log₂ k⌉` bits each.
    pub assignment_bits: u64,
    /// Assignments as serialized (one byte each).
    pub stored_assignment_bits: u64,
    pub codebook_bits: u64,
    pub pool_bits: u64,
    pub projection_bits: u64,
    /// Parameters kept at full precision (biases, FP layers, uniform scales).
    pub uncompressed_bits: u64,
    /// Per-layer tags, dimensions and flags in the checkpoint.
    pub framing_bits: u64,
    /// Size of the same parameters at 32 bits each.
    pub original_bits: u64,
    pub bits_per_value: f64,
    /// Original weight bits over assignment bits.
    pub assignment_ratio: f64,
    pub size_ratio: f64,
}

impl StorageReport {
    /// Theoretical compressed size: everything except framing, assignments at `⌈log₂ k⌉`.
    pub fn compressed_bits(&self) -> u64 {
        self.assignment_bits
            + self.codebook_bits
            + self.pool_bits
            + self.projection_bits
            + self.uncompressed_bits
    }

    /// Exact number of bits this content occupies in a checkpoint.
    pub fn serialized_bits(&self) -> u64 {
        self.stored_assignment_bits
            + self.codebook_bits
            + self.pool_bits
            + self.projection_bits
            + self.uncompressed_bits
            + self.framing_bits
    }

    pub(crate) fn finish(mut self) -> Self {
        let compressed = self.compressed_bits();
        self.size_ratio = if compressed == 0 {
            1.0
        } else {
            self.original_bits as f64 / compressed as f64
        };
        self
    }

    /// Sums two reports. Only `size_ratio` is recomputed; the per-value
    /// figures are left at zero for the caller to fill in.
    pub fn merge(&self, other: &StorageReport) -> StorageReport {
        StorageReport {
            assignment_bits: self.assignment_bits + other.assignment_bits,
            stored_assignment_bits: self.stored_assignment_bits + other.stored_assignment_bits,
            codebook_bits: self.codebook_bits + other.codebook_bits,
            pool_bits: self.pool_bits + other.pool_bits,
            projection_bits: self.projection_bits + other.projection_bits,
            uncompressed_bits: self.uncompressed_bits + other.uncompressed_bits,
            framing_bits: self.framing_bits + other.framing_bits,
            original_bits: self.original_bits + other.original_bits,
            bits_per_value: 0.0,
            assignment_ratio: 0.0,
            size_ratio: 0.0,
        }
        .finish()
    }
}

/// Storage of an m x n layer quantized with sub-vectors of `d` and `k` codewords.
/// PQ codebooks and pools are counted at 16 bits per value, VQ codebooks at 32,
/// matching the checkpoint layout.
pub fn storage_report(
    m: usize,
    n: usize,
    d: usize,
    k: usize,
    scheme: Scheme,
    extra_uncompressed_bits: u64,
) -> Result<StorageReport> {
    check_layout(n, d, k)?;
    let subspaces = (n / d) as u64;
    let (m64, d64, k64) = (m as u64, d as u64, k as u64);
    let width = index_bits(k) as u64;
    let assignment_bits = m64 * subspaces * width;
    let (codebook_bits, pool_bits, projection_bits) = match scheme {
        Scheme::Vq => (k64 * d64 * 32, 0, 0),
        Scheme::Pq => (subspaces * k64 * d64 * 16, 0, 0),
        Scheme::PqPool { entries } => (0, entries as u64 * d64 * 16, subspaces * k64 * 16),
    };
    let weight_bits = 32 * m64 * n as u64;
    Ok(StorageReport {
        assignment_bits,
        stored_assignment_bits: m64 * subspaces * 8,
        codebook_bits,
        pool_bits,
        projection_bits,
        uncompressed_bits: extra_uncompressed_bits,
        framing_bits: 0,
        original_bits: weight_bits + extra_uncompressed_bits,
        bits_per_value: width as f64 / d as f64,
        assignment_ratio: if assignment_bits == 0 {
            f64::INFINITY
        } else {
            weight_bits as f64 / assignment_bits as f64
        },
        size_ratio: 0.0,
    }
    .finish())
}
