//! Sample quality (sliced Wasserstein distance, mode coverage), per-layer error
//! traces between a floating and a quantized model, and size accounting.

use crate::diffusion::net::{from_features, to_features, DATA_DIM};
use crate::diffusion::sampler::{reverse_step, strided_timesteps, Update};
use crate::diffusion::{Denoiser, Schedule};
use crate::error::{ensure, Error, Result};
use crate::model::{CompressedModel, LayerWeight};
use crate::numerics::{gaussian, Matrix, Rng};
use crate::par;
use crate::quantizers::{storage_report, Scheme, StorageReport};

pub const DEFAULT_PROJECTIONS: usize = 128;
/// A mode counts as covered when it holds at least this share of an even split.
pub const COVERAGE_SHARE: f64 = 0.25;
/// Samples within this many mode standard deviations belong to the mode.
pub const MODE_RADIUS: f64 = 3.0;

/// 2-Wasserstein distance between two sorted 1D empirical distributions.
/// Unequal sizes are handled by integrating over the merged quantile grid.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / na as f64).sqrt();
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0.0f64;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        total += (next - pos) * diff * diff;
        pos = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total.max(0.0).sqrt()
}

/// Random unit directions, one per row.
pub fn random_directions(dim: usize, count: usize, rng: &Rng) -> Vec<Vec<f64>> {
    let mut r = rng.fork(0);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| r.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn projected_sorted(points: &Matrix<f32>, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = (0..points.rows())
        .map(|i| {
            points
                .row(i)
                .iter()
                .zip(dir)
                .map(|(&x, &d)| x as f64 * d)
                .sum()
        })
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Per-direction 1D distances underlying [`sliced_wasserstein`].
pub fn sliced_terms(a: &Matrix<f32>, b: &Matrix<f32>, n_proj: usize, rng: &Rng) -> Result<Vec<f64>> {
    ensure!(a.rows() > 0 && b.rows() > 0, Argument, "sliced Wasserstein needs nonempty sets");
    ensure!(a.cols() == b.cols(), Shape, "point dimensions differ: {} vs {}", a.cols(), b.cols());
    ensure!(n_proj >= 1, Argument, "need at least one projection");
    let dirs = random_directions(a.cols(), n_proj, rng);
    Ok(par::map_range(n_proj, |p| {
        wasserstein_1d_sorted(&projected_sorted(a, &dirs[p]), &projected_sorted(b, &dirs[p]))
    }))
}

/// Mean over random directions of the 1D 2-Wasserstein distance.
pub fn sliced_wasserstein(a: &Matrix<f32>, b: &Matrix<f32>, n_proj: usize, rng: &Rng) -> Result<f64> {
    let terms = sliced_terms(a, b, n_proj, rng)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Samples within the mode radius, as a share of an even split.
    pub per_mode: Vec<f64>,
    pub modes_covered: usize,
    /// Share of samples within the radius of some mode.
    pub in_mode: f64,
}

pub fn mode_coverage(samples: &Matrix<f32>, modes: &[[f32; 2]], sigma: f32) -> Result<Coverage> {
    ensure!(samples.cols() == DATA_DIM, Shape, "samples must be 2D");
    ensure!(!modes.is_empty(), Argument, "no modes given");
    let radius_sq = (MODE_RADIUS * sigma as f64).powi(2);
    let mut counts = vec![0usize; modes.len()];
    let mut inside = 0usize;
    for i in 0..samples.rows() {
        let p = samples.row(i);
        let mut best = (f64::INFINITY, 0usize);
        for (c, m) in modes.iter().enumerate() {
            let dist = (p[0] as f64 - m[0] as f64).powi(2) + (p[1] as f64 - m[1] as f64).powi(2);
            if dist < best.0 {
                best = (dist, c);
            }
        }
        if best.0 <= radius_sq {
            counts[best.1] += 1;
            inside += 1;
        }
    }
    let fair = samples.rows().max(1) as f64 / modes.len() as f64;
    let per_mode: Vec<f64> = counts.iter().map(|&c| c as f64 / fair).collect();
    Ok(Coverage {
        modes_covered: per_mode.iter().filter(|&&f| f >= COVERAGE_SHARE).count(),
        per_mode,
        in_mode: inside as f64 / samples.rows().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub swd: f64,
    pub coverage: Option<Coverage>,
    pub n: usize,
    pub seed: u64,
}

impl QualityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,n,seed\n");
        let mut row = |name: &str, v: f64| out.push_str(&format!("{name},{v},{},{}\n", self.n, self.seed));
        row("sliced_wasserstein", self.swd);
        if let Some(c) = &self.coverage {
            row("modes_covered", c.modes_covered as f64);
            row("in_mode_fraction", c.in_mode);
            for (i, f) in c.per_mode.iter().enumerate() {
                row(&format!("mode_{i}_coverage"), *f);
            }
        }
        out
    }
}

pub fn quality_report(
    samples: &Matrix<f32>,
    reference: &Matrix<f32>,
    modes: Option<(&[[f32; 2]], f32)>,
    n_proj: usize,
    seed: u64,
) -> Result<QualityReport> {
    Ok(QualityReport {
        swd: sliced_wasserstein(samples, reference, n_proj, &Rng::new(seed))?,
        coverage: modes.map(|(m, s)| mode_coverage(samples, m, s)).transpose()?,
        n: samples.rows(),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TraceMode {
    /// Both models see the floating model's trajectory.
    Teacher,
    /// Each model follows its own trajectory from a shared start.
    #[default]
    Free,
}

impl std::str::FromStr for TraceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(TraceMode::Teacher),
            "free" => Ok(TraceMode::Free),
            other => Err(Error::Argument(format!("unknown trace mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TraceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TraceMode::Teacher => "teacher",
            TraceMode::Free => "free",
        })
    }
}

/// Mean L2 distance between the two models' layer pre-activations, per layer
/// and per sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTrace {
    pub mode: TraceMode,
    /// Timesteps in sampling order (descending).
    pub timesteps: Vec<usize>,
    /// `l2[layer][step]`.
    pub l2: Vec<Vec<f64>>,
}

impl ErrorTrace {
    /// Output-layer error at the last sampling step.
    pub fn final_error(&self) -> f64 {
        self.l2
            .last()
            .and_then(|row| row.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,timestep,mode,l2\n");
        for (l, row) in self.l2.iter().enumerate() {
            for (t, v) in self.timesteps.iter().zip(row) {
                out.push_str(&format!("{l},{t},{},{v}\n", self.mode));
            }
        }
        out
    }
}

fn mean_column_distance(a: &Matrix<f32>, b: &Matrix<f32>) -> f64 {
    let (rows, cols) = a.shape();
    let mut sq = vec![0.0f64; cols];
    for r in 0..rows {
        for ((s, &x), &y) in sq.iter_mut().zip(a.row(r)).zip(b.row(r)) {
            let d = x as f64 - y as f64;
            *s += d * d;
        }
    }
    sq.iter().map(|v| v.sqrt()).sum::<f64>() / cols.max(1) as f64
}

/// Compares per-layer outputs of `fp` and `q` along deterministic DDIM
/// trajectories of `steps` steps over `n_chains` chains.
pub fn block_error_trace(
    fp: &Denoiser,
    q: &Denoiser,
    s: &Schedule,
    mode: TraceMode,
    steps: usize,
    n_chains: usize,
    rng: &Rng,
) -> Result<ErrorTrace> {
    ensure!(
        fp.shapes() == q.shapes(),
        Argument,
        "models differ in architecture: {:?} vs {:?}",
        fp.shapes(),
        q.shapes()
    );
    ensure!(n_chains >= 1, Argument, "need at least one chain");
    let (fp_net, q_net) = (fp.dense()?, q.dense()?);
    let ts = strided_timesteps(s.steps(), steps)?;
    let start = Matrix::from_raw(n_chains, DATA_DIM, gaussian(&mut rng.fork(0), n_chains * DATA_DIM));
    let mut x_fp = start.clone();
    let mut x_q = start;
    let layers = fp_net.layer_count();
    let mut l2 = vec![Vec::with_capacity(ts.len()); layers];
    let mut order = Vec::with_capacity(ts.len());
    let mut unused = rng.fork(1);
    for (i, &t) in ts.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let tsv = vec![t; n_chains];
        let a = fp_net.forward_trace::<f32>(&to_features(&x_fp), &tsv)?;
        let q_in = match mode {
            TraceMode::Teacher => &x_fp,
            TraceMode::Free => &x_q,
        };
        let b = q_net.forward_trace::<f32>(&to_features(q_in), &tsv)?;
        for l in 0..layers {
            l2[l].push(mean_column_distance(&a.pre[l], &b.pre[l]));
        }
        order.push(t);
        let update = Update::Ddim { eta: 0.0 };
        reverse_step(update, s, t, prev, &mut x_fp, &from_features(a.output()), &mut unused);
        if mode == TraceMode::Free {
            reverse_step(update, s, t, prev, &mut x_q, &from_features(b.output()), &mut unused);
        }
    }
    Ok(ErrorTrace {
        mode,
        timesteps: order,
        l2,
    })
}

/// Bytes before the first layer record in a checkpoint.
pub const HEADER_BYTES: u64 = 39;
/// Tag, `m`, `n`, `d`, `k` and the bias flag of each layer record.
pub const LAYER_FRAMING_BITS: u64 = 8 + 32 + 32 + 16 + 16 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub header_bits: u64,
    pub layers: Vec<StorageReport>,
    pub total: StorageReport,
}

impl SizeReport {
    /// Exact checkpoint length in bits.
    pub fn file_bits(&self) -> u64 {
        self.header_bits + self.total.serialized_bits()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,component,bits,ratio\n");
        let mut push = |layer: &str, r: &StorageReport| {
            let total = r.compressed_bits().max(1) as f64;
            for (name, bits) in [
                ("assignments", r.assignment_bits),
                ("assignments_stored", r.stored_assignment_bits),
                ("codebook", r.codebook_bits),
                ("pool", r.pool_bits),
                ("projection", r.projection_bits),
                ("uncompressed", r.uncompressed_bits),
                ("framing", r.framing_bits),
            ] {
                out.push_str(&format!("{layer},{name},{bits},{}\n", bits as f64 / total));
            }
            out.push_str(&format!(
                "{layer},bits_per_value,{},{}\n",
                r.bits_per_value, r.assignment_ratio
            ));
            out.push_str(&format!(
                "{layer},total,{},{}\n",
                r.compressed_bits(),
                r.size_ratio
            ));
        };
        for (l, r) in self.layers.iter().enumerate() {
            push(&l.to_string(), r);
        }
        push("all", &self.total);
        out
    }
}

/// Storage of one layer, counted exactly as the checkpoint writes it.
pub fn layer_storage(weight: &LayerWeight, bias_len: Option<usize>) -> Result<StorageReport> {
    let (m, n) = weight.shape();
    let bias_bits = bias_len.map_or(0, |b| 32 * b as u64);
    let mut r = match weight {
        LayerWeight::Float(_) => {
            let bits = 32 * (m * n) as u64 + bias_bits;
            StorageReport {
                uncompressed_bits: bits,
                original_bits: bits,
                bits_per_value: 32.0,
                assignment_ratio: 1.0,
                ..StorageReport::default()
            }
        }
        LayerWeight::Uniform(q) => {
            let values = (m * n) as u64;
            StorageReport {
                assignment_bits: values * q.bits as u64,
                stored_assignment_bits: values * 8,
                uncompressed_bits: bias_bits + 64 * m as u64,
                original_bits: 32 * values + bias_bits,
                bits_per_value: q.bits as f64,
                assignment_ratio: 32.0 / q.bits as f64,
                ..StorageReport::default()
            }
        }
        LayerWeight::Vq { codebook, .. } => {
            storage_report(m, n, codebook.d, codebook.centroids.rows(), Scheme::Vq, bias_bits)?
        }
        LayerWeight::Pq { codebook, .. } => {
            storage_report(m, n, codebook.d, codebook.k, Scheme::Pq, bias_bits)?
        }
        LayerWeight::Pooled { pool, projection, .. } => storage_report(
            m,
            n,
            pool.d,
            projection.k,
            Scheme::PqPool { entries: pool.len() },
            bias_bits,
        )?,
    };
    r.framing_bits = LAYER_FRAMING_BITS;
    if matches!(weight, LayerWeight::Pooled { .. }) {
        r.framing_bits += 32;
    }
    Ok(r.finish())
}

pub fn size_report(model: &CompressedModel) -> Result<SizeReport> {
    let layers = model
        .net
        .layers
        .iter()
        .map(|l| layer_storage(&l.weight, l.bias.as_ref().map(Vec::len)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = layers
        .iter()
        .fold(StorageReport::default().finish(), |acc, r| acc.merge(r));
    // Per-value figures over the quantized weights only.
    let (mut values, mut bits) = (0u64, 0u64);
    for (layer, r) in model.net.layers.iter().zip(&layers) {
        if layer.weight.is_quantized() {
            let (m, n) = layer.weight.shape();
            values += (m * n) as u64;
            bits += r.assignment_bits;
        }
    }
    if values > 0 {
        total.bits_per_value = bits as f64 / values as f64;
        total.assignment_ratio = 32.0 * values as f64 / bits.max(1) as f64;
    } else {
        total.bits_per_value = 32.0;
        total.assignment_ratio = 1.0;
    }
    Ok(SizeReport {
        header_bits: HEADER_BYTES * 8,
        layers,
        total,
    })
}
