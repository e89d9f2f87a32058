//! The compressed model: an ordered list of dense layers, each holding its
//! weight either at full precision or in one of the quantized layouts.

use crate::diffusion::{Denoiser, Schedule};
use crate::error::{ensure, Error, Result};
use crate::kmeans::{INIT_ITERS, VQ_ITERS};
use crate::numerics::{fp16_round_slice, Matrix, Rng};
use crate::pool::{
    build_pool, compute_importance, pool_capacity, pooled_reconstruct, CodebookPool, Projection,
    ProjectionRule, DEFAULT_TAU,
};
use crate::quantizers::{
    pq_assign, pq_fit, reconstruct, uniform_quantize, vq_assign, vq_fit, AssignmentGrid,
    PqCodebook, UniformQuant, VqCodebook,
};

/// Quantization method applied to the hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Float,
    Uniform,
    Vq,
    Pq,
    /// PQ with the codebooks folded into a shared pool.
    Dpq,
}

impl Method {
    pub fn code(self) -> u8 {
        match self {
            Method::Float => 0,
            Method::Uniform => 1,
            Method::Vq => 2,
            Method::Pq => 3,
            Method::Dpq => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Method::Float,
            1 => Method::Uniform,
            2 => Method::Vq,
            3 => Method::Pq,
            4 => Method::Dpq,
            _ => return None,
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fp" | "float" => Method::Float,
            "uniform" => Method::Uniform,
            "vq" => Method::Vq,
            "pq" => Method::Pq,
            "dpq" => Method::Dpq,
            other => return Err(Error::Argument(format!("unknown method '{other}'"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Float => "fp",
            Method::Uniform => "uniform",
            Method::Vq => "vq",
            Method::Pq => "pq",
            Method::Dpq => "dpq",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeight {
    Float(Matrix<f32>),
    Uniform(UniformQuant),
    Vq {
        codebook: VqCodebook,
        assignments: AssignmentGrid,
    },
    /// Codebook values are half-precision fixed points.
    Pq {
        codebook: PqCodebook,
        assignments: AssignmentGrid,
    },
    Pooled {
        pool: CodebookPool,
        projection: Projection,
        assignments: AssignmentGrid,
    },
}

impl LayerWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerWeight::Float(w) => w.shape(),
            LayerWeight::Uniform(q) => (q.rows, q.cols),
            LayerWeight::Vq { codebook, assignments } => {
                (assignments.rows, assignments.subspaces * codebook.d)
            }
            LayerWeight::Pq { codebook, assignments } => {
                (assignments.rows, assignments.subspaces * codebook.d)
            }
            LayerWeight::Pooled { pool, assignments, .. } => {
                (assignments.rows, assignments.subspaces * pool.d)
            }
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, LayerWeight::Float(_))
    }

    /// Whether calibration has a codebook to optimize in this layer.
    pub fn has_codebook(&self) -> bool {
        matches!(
            self,
            LayerWeight::Vq { .. } | LayerWeight::Pq { .. } | LayerWeight::Pooled { .. }
        )
    }

    pub fn assignments(&self) -> Option<&AssignmentGrid> {
        match self {
            LayerWeight::Vq { assignments, .. }
            | LayerWeight::Pq { assignments, .. }
            | LayerWeight::Pooled { assignments, .. } => Some(assignments),
            _ => None,
        }
    }

    /// The weight the layer actually applies.
    pub fn dense(&self) -> Result<Matrix<f32>> {
        match self {
            LayerWeight::Float(w) => Ok(w.clone()),
            LayerWeight::Uniform(q) => Ok(q.dequantize()),
            LayerWeight::Vq { codebook, assignments } => reconstruct(codebook, assignments),
            LayerWeight::Pq { codebook, assignments } => reconstruct(codebook, assignments),
            LayerWeight::Pooled {
                pool,
                projection,
                assignments,
            } => pooled_reconstruct(pool, projection, assignments),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: LayerWeight,
    pub bias: Option<Vec<f32>>,
}

impl Layer {
    pub fn rows(&self) -> usize {
        self.weight.shape().0
    }

    pub fn cols(&self) -> usize {
        self.weight.shape().1
    }
}

/// Settings recorded alongside the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub steps: u32,
    pub beta_start: f32,
    pub beta_end: f32,
    pub method: Method,
    pub d: u16,
    pub k: u16,
    pub tau: f32,
    pub seed: u64,
}

impl ModelMeta {
    pub fn new(schedule: &Schedule, seed: u64) -> Self {
        Self {
            steps: schedule.steps() as u32,
            beta_start: schedule.beta_start as f32,
            beta_end: schedule.beta_end as f32,
            method: Method::Float,
            d: 0,
            k: 0,
            tau: 0.0,
            seed,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        crate::diffusion::make_schedule(
            self.steps as usize,
            self.beta_start as f64,
            self.beta_end as f64,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub meta: ModelMeta,
    pub net: Denoiser,
}

/// How to quantize a trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantConfig {
    pub method: Method,
    pub d: usize,
    pub k: usize,
    /// Bit width of the uniform baseline.
    pub bits: u8,
    pub tau: f32,
    /// Lloyd iterations; `None` picks 1000 for VQ and 20 for PQ.
    pub iters: Option<usize>,
    pub projection: ProjectionRule,
}

impl QuantConfig {
    /// Preset for a nominal bit width: `d = 8, 4, 3, 2` for 1–4 bits with `k = 256`.
    pub fn preset(method: Method, bits: u8) -> Result<Self> {
        let d = match bits {
            1 => 8,
            2 => 4,
            3 => 3,
            4 => 2,
            other => return Err(Error::Argument(format!("no preset for {other}-bit"))),
        };
        Ok(Self {
            method,
            d,
            k: 256,
            bits,
            tau: DEFAULT_TAU,
            iters: None,
            projection: ProjectionRule::Nearest,
        })
    }

    fn iters(&self) -> usize {
        self.iters.unwrap_or(match self.method {
            Method::Vq => VQ_ITERS,
            _ => INIT_ITERS,
        })
    }
}

/// Quantizes one weight matrix.
pub fn quantize_weight(w: &Matrix<f32>, cfg: &QuantConfig, rng: &Rng) -> Result<LayerWeight> {
    Ok(match cfg.method {
        Method::Float => LayerWeight::Float(w.clone()),
        Method::Uniform => LayerWeight::Uniform(uniform_quantize(w, cfg.bits)?),
        Method::Vq => {
            let codebook = vq_fit(w, cfg.d, cfg.k, cfg.iters(), rng)?;
            let assignments = vq_assign(w, &codebook)?;
            LayerWeight::Vq { codebook, assignments }
        }
        Method::Pq | Method::Dpq => {
            let mut codebook = pq_fit(w, cfg.d, cfg.k, cfg.iters(), rng)?;
            fp16_round_slice(&mut codebook.centroids);
            let assignments = pq_assign(w, &codebook)?;
            if cfg.method == Method::Pq {
                LayerWeight::Pq { codebook, assignments }
            } else {
                let importance = compute_importance(&assignments, cfg.k)?;
                let capacity = pool_capacity(w.rows(), w.cols(), cfg.d)?;
                let (pool, projection) =
                    build_pool(&codebook, &importance, cfg.tau, capacity, cfg.projection)?;
                LayerWeight::Pooled {
                    pool,
                    projection,
                    assignments,
                }
            }
        }
    })
}

/// Quantizes every hidden-to-hidden layer; the input and output layers and all
/// biases stay at full precision. Layer `l` uses stream `rng.fork(l)`.
pub fn quantize_model(net: &Denoiser, cfg: &QuantConfig, rng: &Rng) -> Result<Denoiser> {
    let count = net.layers.len();
    let mut layers = Vec::with_capacity(count);
    for (l, layer) in net.layers.iter().enumerate() {
        if l == 0 || l + 1 == count || cfg.method == Method::Float {
            layers.push(layer.clone());
            continue;
        }
        let LayerWeight::Float(w) = &layer.weight else {
            return Err(Error::Argument(format!("layer {l} is already quantized")));
        };
        layers.push(Layer {
            weight: quantize_weight(w, cfg, &rng.fork(l as u64))?,
            bias: layer.bias.clone(),
        });
    }
    Ok(Denoiser { layers })
}

/// Quantizes a floating model and records the configuration in its metadata.
pub fn compress(model: &CompressedModel, cfg: &QuantConfig, rng: &Rng) -> Result<CompressedModel> {
    ensure!(
        model.net.layers.iter().all(|l| !l.weight.is_quantized()),
        Argument,
        "input model must be floating point"
    );
    let net = quantize_model(&model.net, cfg, rng)?;
    let mut meta = model.meta.clone();
    meta.method = cfg.method;
    meta.d = if cfg.method == Method::Uniform { 1 } else { cfg.d as u16 };
    meta.k = if cfg.method == Method::Uniform {
        1u16 << cfg.bits
    } else {
        cfg.k as u16
    };
    meta.tau = if cfg.method == Method::Dpq { cfg.tau } else { 0.0 };
    if cfg.method == Method::Float {
        meta.d = 0;
        meta.k = 0;
    }
    Ok(CompressedModel { meta, net })
}
