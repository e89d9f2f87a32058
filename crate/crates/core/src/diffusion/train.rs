use super::net::{from_features, to_features, DenseNet, Denoiser, DATA_DIM};
use super::schedule::{q_sample, Schedule};
use crate::error::{ensure, Error, Result};
use crate::model::LayerWeight;
use crate::numerics::{gaussian, Matrix, Real, Rng};
use crate::optim::{adamw_step, AdamW, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch: 256,
            hidden: 192,
            depth: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch, starting at epoch 1.
    pub curve: Vec<(usize, f64)>,
    pub final_loss: Option<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in &self.curve {
            out.push_str(&format!("{e},{l}\n"));
        }
        out
    }
}

/// A noised minibatch in feature-major layout.
pub struct NoisyBatch<T> {
    pub x_t: Matrix<T>,
    pub ts: Vec<usize>,
    /// Injected noise, `2 x B`.
    pub eps: Matrix<T>,
}

/// Draws `t ~ U{1..T}` then `ε ~ N(0, I)` for every point of `x0` (`B x 2`).
pub fn noisy_batch<T: Real>(x0: &Matrix<f32>, s: &Schedule, rng: &mut Rng) -> Result<NoisyBatch<T>> {
    ensure!(x0.rows() > 0, Argument, "empty batch");
    ensure!(x0.cols() == DATA_DIM, Shape, "points must have {DATA_DIM} columns");
    let b = x0.rows();
    let ts: Vec<usize> = (0..b).map(|_| 1 + rng.below(s.steps())).collect();
    let eps = Matrix::from_raw(b, DATA_DIM, gaussian(rng, b * DATA_DIM));
    let mut x_t = Matrix::zeros(b, DATA_DIM);
    for (i, &t) in ts.iter().enumerate() {
        let row = Matrix::from_raw(1, DATA_DIM, x0.row(i).to_vec());
        let e = Matrix::from_raw(1, DATA_DIM, eps.row(i).to_vec());
        x_t.row_mut(i).copy_from_slice(q_sample(&row, t, &e, s)?.row(0));
    }
    Ok(NoisyBatch {
        x_t: to_features(&x_t),
        ts,
        eps: to_features(&eps),
    })
}

/// Mean over the batch of `‖ε − ε̂‖²` and its gradient with respect to `ε̂`.
pub fn eps_loss<T: Real>(pred: &Matrix<T>, eps: &Matrix<T>) -> (f64, Matrix<T>) {
    let b = pred.cols().max(1) as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, &e) in grad.data_mut().iter_mut().zip(eps.data()) {
        let diff = g.to_f64() - e.to_f64();
        loss += diff * diff;
        *g = T::from_f64(2.0 * diff / b);
    }
    (loss / b, grad)
}

/// Monte Carlo DDPM loss of `net` on `x0` (`B x 2`).
pub fn ddpm_loss(net: &DenseNet, x0: &Matrix<f32>, s: &Schedule, rng: &mut Rng) -> Result<f64> {
    let batch = noisy_batch::<f32>(x0, s, rng)?;
    let pred = net.forward(&batch.x_t, &batch.ts)?;
    Ok(eps_loss(&pred, &batch.eps).0)
}

/// Trains a freshly initialized denoiser on `data` (`N x 2`).
pub fn train_denoiser(
    data: &Matrix<f32>,
    s: &Schedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Denoiser, TrainReport)> {
    let net = Denoiser::new(cfg.hidden, cfg.depth, rng)?;
    train_from(net, data, s, cfg, rng)
}

/// Continues training a floating-point denoiser. An epoch is one shuffled pass
/// over `data` in minibatches of `cfg.batch`.
pub fn train_from(
    mut net: Denoiser,
    data: &Matrix<f32>,
    s: &Schedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Denoiser, TrainReport)> {
    ensure!(cfg.batch >= 1, Argument, "batch size must be positive");
    ensure!(data.cols() == DATA_DIM, Shape, "points must have {DATA_DIM} columns");
    ensure!(
        net.layers.iter().all(|l| !l.weight.is_quantized()),
        Argument,
        "only floating-point models can be trained"
    );
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || data.rows() == 0 {
        return Ok((net, report));
    }
    let mut dense = net.dense()?;
    let hyper = AdamW::with_lr(cfg.lr);
    let mut w_state: Vec<_> = dense
        .weights
        .iter()
        .map(|w| OptimizerState::new(w.data().len(), hyper))
        .collect();
    let mut b_state: Vec<_> = dense
        .biases
        .iter()
        .map(|b| OptimizerState::new(b.len(), hyper))
        .collect();
    let mut order: Vec<usize> = (0..data.rows()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut x0 = Matrix::zeros(chunk.len(), DATA_DIM);
            for (r, &i) in chunk.iter().enumerate() {
                x0.row_mut(r).copy_from_slice(data.row(i));
            }
            let batch = noisy_batch::<f32>(&x0, s, rng)?;
            let trace = dense.forward_trace(&batch.x_t, &batch.ts)?;
            let (loss, d_out) = eps_loss(trace.output(), &batch.eps);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {loss} at epoch {epoch}, batch {batches}"
                )));
            }
            let grads = dense.backward(&trace, d_out)?;
            for l in 0..dense.layer_count() {
                let gw: Vec<f64> = grads.weights[l].data().iter().map(|&g| g as f64).collect();
                adamw_step(dense.weights[l].data_mut(), &gw, &mut w_state[l])?;
                let gb: Vec<f64> = grads.biases[l].iter().map(|&g| g as f64).collect();
                adamw_step(&mut dense.biases[l], &gb, &mut b_state[l])?;
            }
            let finite = dense.weights.iter().all(|w| w.data().iter().all(|v| v.is_finite()))
                && dense.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Training(format!(
                    "parameters became non-finite at epoch {epoch}, batch {batches}"
                )));
            }
            total += loss;
            batches += 1;
        }
        report.curve.push((epoch, total / batches as f64));
    }
    report.final_loss = report.curve.last().map(|c| c.1);
    for (l, layer) in net.layers.iter_mut().enumerate() {
        layer.weight = LayerWeight::Float(dense.weights[l].clone());
        layer.bias = Some(dense.biases[l].clone());
    }
    Ok((net, report))
}

/// Predicted noise for points (`N x 2`) at a per-point timestep.
pub fn predict_batch(net: &DenseNet, x: &Matrix<f32>, ts: &[usize]) -> Result<Matrix<f32>> {
    Ok(from_features(&net.forward::<f32>(&to_features(x), ts)?))
}
