//! Fully connected noise predictor `2 → H → … → H → 2` with SiLU between
//! layers and a sinusoidal timestep embedding added to the first hidden
//! pre-activation.
//!
//! Activations are feature-major: a batch of `B` inputs to a layer with `n`
//! inputs is an `n x B` matrix, so a layer computes `W·x + b·1ᵀ`.

use crate::error::{ensure, Error, Result};
use crate::model::{Layer, LayerWeight};
use crate::numerics::{gaussian, mixed_matmul, Matrix, Real, Rng};

/// Data dimension of the toy problems.
pub const DATA_DIM: usize = 2;

/// Anything that predicts the injected noise for points (`N x 2`) at timestep `t`.
pub trait NoisePredictor: Sync {
    fn predict_eps(&self, x: &Matrix<f32>, t: usize) -> Matrix<f32>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub layers: Vec<Layer>,
}

impl Denoiser {
    /// Fresh network with `depth` hidden layers of width `hidden`, weights
    /// drawn from `N(0, 1/fan_in)` and zero biases.
    pub fn new(hidden: usize, depth: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(hidden >= 1 && depth >= 1, Argument, "network needs at least one hidden layer");
        let mut dims = vec![DATA_DIM];
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(DATA_DIM);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (n, m) = (w[0], w[1]);
                let scale = 1.0 / (n as f32).sqrt();
                let vals = gaussian(rng, m * n).into_iter().map(|v| v * scale).collect();
                Layer {
                    weight: LayerWeight::Float(Matrix::from_raw(m, n, vals)),
                    bias: Some(vec![0.0; m]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, Layer::rows)
    }

    /// Layer shapes, used to decide whether two models can be compared.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers.len() >= 2, Argument, "network needs at least two layers");
        let shapes = self.shapes();
        ensure!(shapes[0].1 == DATA_DIM, Shape, "first layer must read {DATA_DIM} inputs");
        ensure!(
            shapes.last().unwrap().0 == DATA_DIM,
            Shape,
            "last layer must produce {DATA_DIM} outputs"
        );
        for w in shapes.windows(2) {
            ensure!(w[0].0 == w[1].1, Shape, "layer widths do not chain: {:?}", shapes);
        }
        for l in &self.layers {
            if let Some(b) = &l.bias {
                ensure!(b.len() == l.rows(), Shape, "bias length {} for {} rows", b.len(), l.rows());
            }
        }
        Ok(())
    }

    /// Materializes every layer's effective weight.
    pub fn dense(&self) -> Result<DenseNet> {
        self.validate()?;
        let weights = self
            .layers
            .iter()
            .map(|l| l.weight.dense())
            .collect::<Result<Vec<_>>>()?;
        let biases = self
            .layers
            .iter()
            .map(|l| l.bias.clone().unwrap_or_else(|| vec![0.0; l.rows()]))
            .collect();
        Ok(DenseNet { weights, biases })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub weights: Vec<Matrix<f32>>,
    pub biases: Vec<Vec<f32>>,
}

/// Per-layer inputs and pre-activations of one forward pass. `pre.last()` is
/// the network output.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub inputs: Vec<Matrix<T>>,
    pub pre: Vec<Matrix<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.pre.last().expect("trace of a non-empty network")
    }
}

#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

/// Sinusoidal embedding of each timestep, as a `dim x B` matrix.
pub fn time_embedding<T: Real>(ts: &[usize], dim: usize) -> Matrix<T> {
    let half = dim / 2;
    let column = |t: usize| -> Vec<T> {
        let mut col = vec![T::ZERO; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            col[i] = T::from_f64(arg.sin());
            col[half + i] = T::from_f64(arg.cos());
        }
        col
    };
    let b = ts.len();
    let mut out = Matrix::zeros(dim, b);
    let mut cached: Option<(usize, Vec<T>)> = None;
    for (c, &t) in ts.iter().enumerate() {
        if cached.as_ref().map(|(ct, _)| *ct) != Some(t) {
            cached = Some((t, column(t)));
        }
        let col = &cached.as_ref().unwrap().1;
        for (r, &v) in col.iter().enumerate() {
            out.data_mut()[r * b + c] = v;
        }
    }
    out
}

#[inline]
pub fn silu<T: Real>(z: T) -> T {
    z / (T::ONE + (-z).exp())
}

#[inline]
pub fn silu_grad<T: Real>(z: T) -> T {
    let s = T::ONE / (T::ONE + (-z).exp());
    s * (T::ONE + z * (T::ONE - s))
}

/// `W·x + b·1ᵀ`.
pub fn linear<T: Real>(w: &Matrix<f32>, bias: &[f32], x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = mixed_matmul(w, x)?;
    let b = y.cols();
    for (i, &bi) in bias.iter().enumerate() {
        let bi = T::from_f32(bi);
        for v in &mut y.data_mut()[i * b..(i + 1) * b] {
            *v += bi;
        }
    }
    Ok(y)
}

/// Points (`N x 2`, row per point) to the feature-major layout and back.
pub fn to_features<T: Real>(points: &Matrix<f32>) -> Matrix<T> {
    points.transpose().cast()
}

pub fn from_features<T: Real>(x: &Matrix<T>) -> Matrix<f32> {
    x.cast::<f32>().transpose()
}

impl DenseNet {
    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn forward_trace<T: Real>(&self, x: &Matrix<T>, ts: &[usize]) -> Result<Trace<T>> {
        let weights: Vec<&Matrix<f32>> = self.weights.iter().collect();
        forward_with(&weights, &self.biases, x, ts)
    }

    pub fn forward<T: Real>(&self, x: &Matrix<T>, ts: &[usize]) -> Result<Matrix<T>> {
        let mut trace = self.forward_trace(x, ts)?;
        Ok(trace.pre.pop().expect("non-empty network"))
    }

    pub fn backward<T: Real>(&self, trace: &Trace<T>, d_out: Matrix<T>) -> Result<Grads<T>> {
        let weights: Vec<&Matrix<f32>> = self.weights.iter().collect();
        backward_with(&weights, trace, d_out)
    }
}

/// Forward pass through explicit weights.
pub fn forward_with<T: Real>(
    weights: &[&Matrix<f32>],
    biases: &[Vec<f32>],
    x: &Matrix<T>,
    ts: &[usize],
) -> Result<Trace<T>> {
    ensure!(x.cols() == ts.len(), Shape, "{} inputs but {} timesteps", x.cols(), ts.len());
    let count = weights.len();
    let mut inputs = Vec::with_capacity(count);
    let mut pre = Vec::with_capacity(count);
    let mut h = x.clone();
    for l in 0..count {
        let mut z = linear(weights[l], &biases[l], &h)?;
        if l == 0 {
            let emb = time_embedding::<T>(ts, z.rows());
            for (v, &e) in z.data_mut().iter_mut().zip(emb.data()) {
                *v += e;
            }
        }
        let next = if l + 1 < count { Some(z.map(silu)) } else { None };
        inputs.push(h);
        pre.push(z);
        if let Some(n) = next {
            h = n;
        } else {
            h = Matrix::zeros(0, 0);
        }
    }
    Ok(Trace { inputs, pre })
}

/// Gradients of a scalar loss given `d_out = ∂L/∂output`.
pub fn backward_with<T: Real>(
    weights: &[&Matrix<f32>],
    trace: &Trace<T>,
    d_out: Matrix<T>,
) -> Result<Grads<T>> {
    let count = weights.len();
    ensure!(
        d_out.shape() == trace.output().shape(),
        Shape,
        "upstream gradient shape does not match output"
    );
    let mut gw = Vec::with_capacity(count);
    let mut gb = Vec::with_capacity(count);
    let mut delta = d_out;
    for l in (0..count).rev() {
        gw.push(mixed_matmul(&delta, &trace.inputs[l].transpose())?);
        gb.push(
            (0..delta.rows())
                .map(|i| delta.row(i).iter().fold(T::ZERO, |a, &v| a + v))
                .collect(),
        );
        if l > 0 {
            let mut dx = mixed_matmul(&weights[l].transpose(), &delta)?;
            for (g, &z) in dx.data_mut().iter_mut().zip(trace.pre[l - 1].data()) {
                *g *= silu_grad(z);
            }
            delta = dx;
        }
    }
    gw.reverse();
    gb.reverse();
    Ok(Grads {
        weights: gw,
        biases: gb,
    })
}

impl NoisePredictor for DenseNet {
    fn predict_eps(&self, x: &Matrix<f32>, t: usize) -> Matrix<f32> {
        let ts = vec![t; x.rows()];
        let out = self
            .forward::<f32>(&to_features(x), &ts)
            .expect("shapes validated at construction");
        from_features(&out)
    }
}

impl TryFrom<&Denoiser> for DenseNet {
    type Error = Error;
    fn try_from(net: &Denoiser) -> Result<Self> {
        net.dense()
    }
}
