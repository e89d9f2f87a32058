//! The `DPQ1` checkpoint format. All integers and floats are little-endian and
//! records are packed without padding.
//!
//! ```text
//! header   "DPQ1" | version u16 | layers u32
//!          | steps u32 | beta_start f32 | beta_end f32
//!          | method u8 | d u16 | k u16 | tau f32 | seed u64
//! layer    tag u8 | m u32 | n u32 | d u16 | k u16 | payload | bias flag u8 | [m x f32]
//! payload  0 FP       m·n f32
//!          1 VQ       k·d f32, m·(n/d) u8
//!          2 PQ       (n/d)·k·d f16, m·(n/d) u8
//!          3 PQ+POOL  N' u32, N'·d f16, (n/d)·k u16, m·(n/d) u8
//!          4 UNIFORM  (d = 1, k = 2^bits) m f32 scale, m f32 zero point, m·n u8
//! ```

use std::path::Path;

use half::f16;

use crate::diffusion::Denoiser;
use crate::error::{ensure, Error, Result};
use crate::model::{CompressedModel, Layer, LayerWeight, Method, ModelMeta};
use crate::numerics::Matrix;
use crate::pool::{pool_capacity, CodebookPool, Projection, MAX_POOL_ENTRIES};
use crate::quantizers::{check_layout, AssignmentGrid, PqCodebook, UniformQuant, VqCodebook};

pub const MAGIC: &[u8; 4] = b"DPQ1";
pub const VERSION: u16 = 1;

const TAG_FP: u8 = 0;
const TAG_VQ: u8 = 1;
const TAG_PQ: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_UNIFORM: u8 = 4;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn f16s(&mut self, v: &[f32]) {
        for &x in v {
            self.u16(f16::from_f32(x).to_bits());
        }
    }
}

fn dim<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit the checkpoint field")))
}

pub fn to_bytes(model: &CompressedModel) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u32(dim(model.net.layers.len(), "layer count")?);
    let meta = &model.meta;
    w.u32(meta.steps);
    w.f32s(&[meta.beta_start, meta.beta_end]);
    w.u8(meta.method.code());
    w.u16(meta.d);
    w.u16(meta.k);
    w.f32s(&[meta.tau]);
    w.u64(meta.seed);
    for layer in &model.net.layers {
        let (m, n) = layer.weight.shape();
        let (tag, d, k) = match &layer.weight {
            LayerWeight::Float(_) => (TAG_FP, 0, 0),
            LayerWeight::Vq { codebook, .. } => (TAG_VQ, codebook.d, codebook.centroids.rows()),
            LayerWeight::Pq { codebook, .. } => (TAG_PQ, codebook.d, codebook.k),
            LayerWeight::Pooled { pool, projection, .. } => (TAG_POOL, pool.d, projection.k),
            LayerWeight::Uniform(q) => (TAG_UNIFORM, 1, 1usize << q.bits),
        };
        w.u8(tag);
        w.u32(dim(m, "row count")?);
        w.u32(dim(n, "column count")?);
        w.u16(dim(d, "sub-vector dimension")?);
        w.u16(dim(k, "codebook size")?);
        match &layer.weight {
            LayerWeight::Float(x) => w.f32s(x.data()),
            LayerWeight::Vq { codebook, assignments } => {
                w.f32s(codebook.centroids.data());
                w.buf.extend_from_slice(&assignments.indices);
            }
            LayerWeight::Pq { codebook, assignments } => {
                w.f16s(&codebook.centroids);
                w.buf.extend_from_slice(&assignments.indices);
            }
            LayerWeight::Pooled {
                pool,
                projection,
                assignments,
            } => {
                w.u32(dim(pool.len(), "pool size")?);
                w.f16s(&pool.entries);
                for &p in &projection.table {
                    w.u16(p);
                }
                w.buf.extend_from_slice(&assignments.indices);
            }
            LayerWeight::Uniform(q) => {
                w.f32s(&q.scale);
                w.f32s(&q.zero_point);
                w.buf.extend_from_slice(&q.codes);
            }
        }
        match &layer.bias {
            Some(b) => {
                ensure!(b.len() == m, Shape, "bias length {} for {m} rows", b.len());
                w.u8(1);
                w.f32s(b);
            }
            None => w.u8(0),
        }
    }
    Ok(w.buf)
}

/// Writes the checkpoint and returns its length in bytes.
pub fn save(model: &CompressedModel, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!(
                "truncated: need {len} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(a: usize, b: usize) -> Result<usize> {
        a.checked_mul(b)
            .ok_or_else(|| Error::Corruption(format!("record size {a} x {b} overflows")))
    }
    fn f32s(&mut self, len: usize) -> Result<Vec<f32>> {
        let raw = self.take(Self::count(len, 4)?)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        ensure!(v.iter().all(|x| x.is_finite()), Corruption, "non-finite value at offset {}", self.pos);
        Ok(v)
    }
    fn f16s(&mut self, len: usize) -> Result<Vec<f32>> {
        let raw = self.take(Self::count(len, 2)?)?;
        let v: Vec<f32> = raw
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
            .collect();
        ensure!(v.iter().all(|x| x.is_finite()), Corruption, "non-finite value at offset {}", self.pos);
        Ok(v)
    }
    fn indices(&mut self, rows: usize, subspaces: usize, k: usize) -> Result<AssignmentGrid> {
        let indices = self.take(Self::count(rows, subspaces)?)?.to_vec();
        if let Some(&max) = indices.iter().max() {
            ensure!((max as usize) < k, Corruption, "assignment index {max} not below k = {k}");
        }
        Ok(AssignmentGrid {
            rows,
            subspaces,
            indices,
        })
    }
}

fn corrupt_layout(l: usize, e: Error) -> Error {
    Error::Corruption(format!("layer {l}: {e}"))
}

fn read_layer(r: &mut Reader, l: usize) -> Result<Layer> {
    let tag = r.u8()?;
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let d = r.u16()? as usize;
    let k = r.u16()? as usize;
    let weight = match tag {
        TAG_FP => {
            ensure!(d == 0 && k == 0, Corruption, "layer {l}: floating layer with d = {d}, k = {k}");
            LayerWeight::Float(Matrix::from_vec(m, n, r.f32s(Reader::count(m, n)?)?)?)
        }
        TAG_VQ | TAG_PQ | TAG_POOL => {
            check_layout(n, d, k).map_err(|e| corrupt_layout(l, e))?;
            let subspaces = n / d;
            match tag {
                TAG_VQ => {
                    let centroids = Matrix::from_vec(k, d, r.f32s(k * d)?)?;
                    LayerWeight::Vq {
                        codebook: VqCodebook { d, centroids },
                        assignments: r.indices(m, subspaces, k)?,
                    }
                }
                TAG_PQ => LayerWeight::Pq {
                    codebook: PqCodebook {
                        d,
                        k,
                        subspaces,
                        centroids: r.f16s(Reader::count(subspaces * k, d)?)?,
                    },
                    assignments: r.indices(m, subspaces, k)?,
                },
                _ => {
                    let entries = r.u32()? as usize;
                    ensure!(
                        (1..=MAX_POOL_ENTRIES).contains(&entries),
                        Corruption,
                        "layer {l}: pool size {entries} out of range"
                    );
                    let values = r.f16s(entries * d)?;
                    let raw = r.take(Reader::count(subspaces * k, 2)?)?;
                    let table: Vec<u16> =
                        raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
                    if let Some(&max) = table.iter().max() {
                        ensure!(
                            (max as usize) < entries,
                            Corruption,
                            "layer {l}: projection index {max} not below pool size {entries}"
                        );
                    }
                    // Build-time diagnostics are not stored.
                    let pool = CodebookPool {
                        d,
                        capacity: pool_capacity(m, n, d).unwrap_or(entries).max(entries),
                        entries: values,
                        phase1_count: 0,
                        entry_importance: vec![0; entries],
                    };
                    LayerWeight::Pooled {
                        pool,
                        projection: Projection { subspaces, k, table },
                        assignments: r.indices(m, subspaces, k)?,
                    }
                }
            }
        }
        TAG_UNIFORM => {
            ensure!(
                d == 1 && k.is_power_of_two() && (2..=256).contains(&k),
                Corruption,
                "layer {l}: uniform layer with d = {d}, k = {k}"
            );
            let scale = r.f32s(m)?;
            let zero_point = r.f32s(m)?;
            let codes = r.take(Reader::count(m, n)?)?.to_vec();
            if let Some(&max) = codes.iter().max() {
                ensure!((max as usize) < k, Corruption, "layer {l}: uniform code {max} not below {k}");
            }
            LayerWeight::Uniform(UniformQuant {
                bits: k.trailing_zeros() as u8,
                rows: m,
                cols: n,
                scale,
                zero_point,
                codes,
            })
        }
        other => return Err(Error::Format(format!("layer {l}: unknown layer tag {other}"))),
    };
    let bias = match r.u8()? {
        0 => None,
        1 => Some(r.f32s(m)?),
        other => return Err(Error::Corruption(format!("layer {l}: bias flag {other}"))),
    };
    Ok(Layer { weight, bias })
}

pub fn from_bytes(buf: &[u8]) -> Result<CompressedModel> {
    ensure!(buf.len() >= 4 && &buf[..4] == MAGIC, Format, "not a DPQ1 checkpoint (bad magic)");
    let mut r = Reader { buf, pos: 4 };
    let version = r.u16()?;
    ensure!(version == VERSION, Format, "unsupported checkpoint version {version}");
    let count = r.u32()? as usize;
    let steps = r.u32()?;
    let beta_start = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let beta_end = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let code = r.u8()?;
    let method = Method::from_code(code).ok_or_else(|| Error::Format(format!("unknown method code {code}")))?;
    let d = r.u16()?;
    let k = r.u16()?;
    let tau = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let seed = r.u64()?;
    let meta = ModelMeta {
        steps,
        beta_start,
        beta_end,
        method,
        d,
        k,
        tau,
        seed,
    };
    let mut layers = Vec::new();
    for l in 0..count {
        layers.push(read_layer(&mut r, l)?);
    }
    ensure!(
        r.pos == buf.len(),
        Corruption,
        "{} trailing bytes after the last layer",
        buf.len() - r.pos
    );
    Ok(CompressedModel {
        meta,
        net: Denoiser { layers },
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<CompressedModel> {
    from_bytes(&std::fs::read(path)?)
}
