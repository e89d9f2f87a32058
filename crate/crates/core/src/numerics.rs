//! Dense row-major matrices, half-precision rounding and the seeded random
//! stream shared by every other module.
//!
//! The random stream is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`. Child streams are derived with
//! [`Rng::fork`], which mixes the parent seed and a stream id through
//! SplitMix64; a child never depends on how far the parent has advanced.

use std::fmt::Debug;

use half::f16;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::par;

/// Floating-point element type used by the compute kernels.
pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}
impl_real!(f32);
impl_real!(f64);

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Shape,
            "{} values for a {rows}x{cols} matrix",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            Argument,
            "matrix values must be finite"
        );
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but only checks the length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Shape,
            "ragged rows"
        );
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Like [`Matrix::map`] with the `(row, col)` of each entry.
    pub fn map_indexed<U: Real>(&self, f: impl Fn(usize, usize, T) -> U) -> Matrix<U> {
        let cols = self.cols.max(1);
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| f(i / cols, i % cols, v))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }

    /// Sum of squared entries, accumulated in double precision.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }
}

/// Accumulator precision for [`matmul_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Accumulate {
    #[default]
    Native,
    Double,
}

/// Standard matrix product accumulated in the element type.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    mixed_matmul(a, b)
}

/// Matrix product with an explicit accumulator precision.
pub fn matmul_with<T: Real>(a: &Matrix<T>, b: &Matrix<T>, acc: Accumulate) -> Result<Matrix<T>> {
    match acc {
        Accumulate::Native => mixed_matmul(a, b),
        Accumulate::Double => {
            let prod = mixed_matmul(&a.cast::<f64>(), &b.cast::<f64>())?;
            Ok(prod.cast())
        }
    }
}

const ROW_BLOCK: usize = 4;

/// `a · b` where the left operand may be stored at a different precision
/// than the right one; accumulation happens in the right operand's type.
pub fn mixed_matmul<A: Real, B: Real>(a: &Matrix<A>, b: &Matrix<B>) -> Result<Matrix<B>> {
    ensure!(
        a.cols == b.rows,
        Shape,
        "cannot multiply {}x{} by {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let (m, inner, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::<B>::zeros(m, p);
    if p == 0 || m == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, ROW_BLOCK * p, |blk, chunk| {
        let r0 = blk * ROW_BLOCK;
        let nrows = chunk.len() / p;
        if nrows == ROW_BLOCK {
            let (o0, rest) = chunk.split_at_mut(p);
            let (o1, rest) = rest.split_at_mut(p);
            let (o2, o3) = rest.split_at_mut(p);
            for kk in 0..inner {
                let w0 = B::from_f64(a.get(r0, kk).to_f64());
                let w1 = B::from_f64(a.get(r0 + 1, kk).to_f64());
                let w2 = B::from_f64(a.get(r0 + 2, kk).to_f64());
                let w3 = B::from_f64(a.get(r0 + 3, kk).to_f64());
                let brow = b.row(kk);
                for (c, &bv) in brow.iter().enumerate() {
                    o0[c] += w0 * bv;
                    o1[c] += w1 * bv;
                    o2[c] += w2 * bv;
                    o3[c] += w3 * bv;
                }
            }
        } else {
            for (r, orow) in chunk.chunks_mut(p).enumerate() {
                for kk in 0..inner {
                    let w = B::from_f64(a.get(r0 + r, kk).to_f64());
                    for (o, &bv) in orow.iter_mut().zip(b.row(kk)) {
                        *o += w * bv;
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Squared Euclidean distance.
pub fn l2_sq(a: &[f32], b: &[f32]) -> Result<f32> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "length mismatch {} vs {}",
        a.len(),
        b.len()
    );
    Ok(l2_sq_unchecked(a, b))
}

#[inline]
pub(crate) fn l2_sq_unchecked(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Largest finite binary16 value.
pub const FP16_MAX: f32 = 65504.0;

/// Rounds through IEEE binary16 (round-to-nearest-even). Values past the half
/// range saturate to `±FP16_MAX` and set the returned flag.
pub fn fp16_round_checked(x: f32) -> (f32, bool) {
    let h = f16::from_f32(x).to_f32();
    if h.is_infinite() && x.is_finite() {
        (FP16_MAX.copysign(x), true)
    } else {
        (h, false)
    }
}

pub fn fp16_round(x: f32) -> f32 {
    fp16_round_checked(x).0
}

pub(crate) fn fp16_round_slice(v: &mut [f32]) {
    for x in v {
        *x = fp16_round(*x);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random stream. Single owner; hand workers their own [`Rng::fork`].
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream determined only by this stream's seed and `stream`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}

/// `n` i.i.d. standard normal draws.
pub fn gaussian(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.normal() as f32).collect()
}
