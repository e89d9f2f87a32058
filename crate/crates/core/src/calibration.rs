//! Post-quantization calibration of codebooks against the DDPM loss.
//!
//! Each step runs one forward pass in which every codebook layer may first
//! reassign its sub-vectors to the codewords that best reproduce the original
//! layer output on the current activations, then a backward pass that moves
//! the codebooks (or pool entries) along the loss gradient with AdamW.
//! Assignments never receive gradients.

use crate::diffusion::net::{backward_with, silu, time_embedding, Trace};
use crate::diffusion::train::{eps_loss, noisy_batch};
use crate::diffusion::{Denoiser, Schedule};
use crate::error::{ensure, Error, Result};
use crate::model::{CompressedModel, Layer, LayerWeight};
use crate::numerics::{fp16_round_slice, mixed_matmul, Matrix, Real, Rng};
use crate::par;
use crate::quantizers::AssignmentGrid;

pub use crate::optim::{adamw_step, AdamW, OptimizerState};

/// A codebook-quantized layer with the state calibration needs.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    /// One of the codebook layouts (VQ, PQ or pooled PQ).
    pub weight: LayerWeight,
    pub bias: Vec<f32>,
    /// Input activations of the last forward pass while calibrating.
    pub capture: Option<Matrix<f32>>,
    calibrating: bool,
}

impl QuantizedLayer {
    pub fn new(layer: &Layer) -> Result<Self> {
        ensure!(
            layer.weight.has_codebook(),
            Argument,
            "only codebook layers can be calibrated"
        );
        let (m, _) = layer.weight.shape();
        Ok(Self {
            weight: layer.weight.clone(),
            bias: layer.bias.clone().unwrap_or_else(|| vec![0.0; m]),
            capture: None,
            calibrating: false,
        })
    }

    /// Enables or disables activation capture; disabling drops the capture.
    pub fn set_calibrating(&mut self, on: bool) {
        self.calibrating = on;
        if !on {
            self.capture = None;
        }
    }

    pub fn is_calibrating(&self) -> bool {
        self.calibrating
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn assignments(&self) -> &AssignmentGrid {
        self.weight.assignments().expect("codebook layer")
    }

    fn assignments_mut(&mut self) -> &mut AssignmentGrid {
        match &mut self.weight {
            LayerWeight::Vq { assignments, .. }
            | LayerWeight::Pq { assignments, .. }
            | LayerWeight::Pooled { assignments, .. } => assignments,
            _ => unreachable!("codebook layer"),
        }
    }

    pub fn d(&self) -> usize {
        match &self.weight {
            LayerWeight::Vq { codebook, .. } => codebook.d,
            LayerWeight::Pq { codebook, .. } => codebook.d,
            LayerWeight::Pooled { pool, .. } => pool.d,
            _ => unreachable!("codebook layer"),
        }
    }

    /// Codewords available to every column group.
    pub fn k(&self) -> usize {
        match &self.weight {
            LayerWeight::Vq { codebook, .. } => codebook.centroids.rows(),
            LayerWeight::Pq { codebook, .. } => codebook.k,
            LayerWeight::Pooled { projection, .. } => projection.k,
            _ => unreachable!("codebook layer"),
        }
    }

    /// Codeword `p` as seen by column group `j`.
    pub fn candidate(&self, j: usize, p: usize) -> &[f32] {
        match &self.weight {
            LayerWeight::Vq { codebook, .. } => codebook.centroids.row(p),
            LayerWeight::Pq { codebook, .. } => {
                let at = (j * codebook.k + p) * codebook.d;
                &codebook.centroids[at..at + codebook.d]
            }
            LayerWeight::Pooled { pool, projection, .. } => pool.entry(projection.get(j, p)),
            _ => unreachable!("codebook layer"),
        }
    }

    /// The trainable values: VQ centroids, PQ centroids or pool entries.
    pub fn params(&self) -> &[f32] {
        match &self.weight {
            LayerWeight::Vq { codebook, .. } => codebook.centroids.data(),
            LayerWeight::Pq { codebook, .. } => &codebook.centroids,
            LayerWeight::Pooled { pool, .. } => &pool.entries,
            _ => unreachable!("codebook layer"),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        match &mut self.weight {
            LayerWeight::Vq { codebook, .. } => codebook.centroids.data_mut(),
            LayerWeight::Pq { codebook, .. } => &mut codebook.centroids,
            LayerWeight::Pooled { pool, .. } => &mut pool.entries,
            _ => unreachable!("codebook layer"),
        }
    }

    /// Offset into [`QuantizedLayer::params`] of the codeword `(j, p)`.
    fn param_offset(&self, j: usize, p: usize) -> usize {
        let d = self.d();
        match &self.weight {
            LayerWeight::Vq { .. } => p * d,
            LayerWeight::Pq { codebook, .. } => (j * codebook.k + p) * d,
            LayerWeight::Pooled { projection, .. } => projection.get(j, p) * d,
            _ => unreachable!("codebook layer"),
        }
    }

    pub fn reconstruct(&self) -> Result<Matrix<f32>> {
        self.weight.dense()
    }

    pub fn to_layer(&self) -> Layer {
        Layer {
            weight: self.weight.clone(),
            bias: Some(self.bias.clone()),
        }
    }
}

/// `W'·x + b·1ᵀ`; captures `x` while calibrating.
pub fn quantized_forward(layer: &mut QuantizedLayer, x: &Matrix<f32>) -> Result<Matrix<f32>> {
    let (_, n) = layer.shape();
    ensure!(x.rows() == n, Shape, "layer expects {n} input rows, got {}", x.rows());
    let w = layer.reconstruct()?;
    let y = crate::diffusion::net::linear(&w, &layer.bias, x)?;
    if layer.calibrating {
        layer.capture = Some(x.clone());
    }
    Ok(y)
}

/// `x_j x_jᵀ` for every column group, in double precision.
fn group_grams(x: &Matrix<f32>, d: usize) -> Vec<Vec<f64>> {
    let groups = x.rows() / d;
    par::map_range(groups, |j| {
        let mut g = vec![0.0f64; d * d];
        for a in 0..d {
            let ra = x.row(j * d + a);
            for b in a..d {
                let rb = x.row(j * d + b);
                let s: f64 = ra.iter().zip(rb).map(|(&u, &v)| u as f64 * v as f64).sum();
                g[a * d + b] = s;
                g[b * d + a] = s;
            }
        }
        g
    })
}

/// `‖(w_ij − c)·x_j‖²` written as `e G eᵀ` with `e = w_ij − c`.
pub fn activation_cost(w: &[f32], c: &[f32], gram: &[f64]) -> f64 {
    let d = w.len();
    let e: Vec<f64> = w.iter().zip(c).map(|(&a, &b)| a as f64 - b as f64).collect();
    let mut s = 0.0;
    for a in 0..d {
        let mut row = 0.0;
        for b in 0..d {
            row += gram[a * d + b] * e[b];
        }
        s += e[a] * row;
    }
    s
}

/// Activation-aware reassignment on explicit activations `x` (`n x B`).
/// Column groups whose activations are all zero keep their indices.
pub fn reassign_with(layer: &QuantizedLayer, original: &Matrix<f32>, x: &Matrix<f32>) -> Result<AssignmentGrid> {
    let (m, n) = layer.shape();
    ensure!(original.shape() == (m, n), Shape, "original weight is {:?}, layer is {m}x{n}", original.shape());
    ensure!(x.rows() == n, Shape, "activations have {} rows, layer has {n} inputs", x.rows());
    let d = layer.d();
    let k = layer.k();
    let grams = group_grams(x, d);
    let current = layer.assignments();
    let columns = par::map_range(n / d, |j| {
        let g = &grams[j];
        if g.iter().all(|&v| v == 0.0) {
            return (0..m).map(|i| current.get(i, j) as u8).collect::<Vec<u8>>();
        }
        // e G eᵀ = w G wᵀ − 2 c G wᵀ + c G cᵀ; the first term is shared by all
        // candidates. A single-precision scan shortlists candidates whose score
        // is within rounding distance of the minimum; those are rescored in
        // double precision.
        let zero = vec![0.0f32; d];
        let quad: Vec<f64> = (0..k).map(|p| activation_cost(layer.candidate(j, p), &zero, g)).collect();
        let quad32: Vec<f32> = quad.iter().map(|&v| v as f32).collect();
        let quad_max = quad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut planes = vec![0.0f64; d * k];
        for p in 0..k {
            for (a, &v) in layer.candidate(j, p).iter().enumerate() {
                planes[a * k + p] = -2.0 * v as f64;
            }
        }
        let planes32: Vec<f32> = planes.iter().map(|&v| v as f32).collect();
        let c_max = planes.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut out = Vec::with_capacity(m);
        let mut gw = vec![0.0f64; d];
        let mut scores = vec![0.0f32; k];
        for i in 0..m {
            let w = &original.row(i)[j * d..(j + 1) * d];
            for (a, slot) in gw.iter_mut().enumerate() {
                *slot = (0..d).map(|b| g[a * d + b] * w[b] as f64).sum();
            }
            scores.copy_from_slice(&quad32);
            for (a, &ga) in gw.iter().enumerate() {
                let ga = ga as f32;
                for (sc, &c) in scores.iter_mut().zip(&planes32[a * k..(a + 1) * k]) {
                    *sc += c * ga;
                }
            }
            let mut low = f32::INFINITY;
            for &sc in &scores {
                if sc < low {
                    low = sc;
                }
            }
            let magnitude = quad_max + c_max * gw.iter().map(|v| v.abs()).sum::<f64>();
            let cut = low as f64 + 1e-5 * magnitude;
            let mut best = (f64::INFINITY, 0usize);
            for (p, &sc) in scores.iter().enumerate() {
                if (sc as f64) <= cut {
                    let exact = gw
                        .iter()
                        .enumerate()
                        .fold(quad[p], |acc, (a, &ga)| acc + planes[a * k + p] * ga);
                    if exact < best.0 {
                        best = (exact, p);
                    }
                }
            }
            out.push(best.1 as u8);
        }
        out
    });
    let subspaces = n / d;
    let mut indices = vec![0u8; m * subspaces];
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            indices[i * subspaces + j] = v;
        }
    }
    Ok(AssignmentGrid {
        rows: m,
        subspaces,
        indices,
    })
}

/// Reassignment against the activations captured by the last forward pass.
pub fn reassign(layer: &QuantizedLayer, original: &Matrix<f32>) -> Result<AssignmentGrid> {
    let x = layer
        .capture
        .as_ref()
        .ok_or_else(|| Error::State("no captured activations; run a calibrating forward pass first".into()))?;
    reassign_with(layer, original, x)
}

/// Scatters a dense weight gradient onto the trainable codebook values.
pub fn scatter_weight_grad<T: Real>(layer: &QuantizedLayer, grad_w: &Matrix<T>) -> Result<Vec<f64>> {
    let (m, n) = layer.shape();
    ensure!(grad_w.shape() == (m, n), Shape, "gradient is {:?}, layer is {m}x{n}", grad_w.shape());
    let d = layer.d();
    let a = layer.assignments();
    let mut out = vec![0.0f64; layer.params().len()];
    for i in 0..m {
        let row = grad_w.row(i);
        for j in 0..n / d {
            let at = layer.param_offset(j, a.get(i, j));
            for (o, &g) in out[at..at + d].iter_mut().zip(&row[j * d..(j + 1) * d]) {
                *o += g.to_f64();
            }
        }
    }
    Ok(out)
}

/// Gradient of the loss with respect to the codebook values given the
/// gradient at the layer output (`m x B`) and the layer input (`n x B`).
pub fn codebook_grad<T: Real>(layer: &QuantizedLayer, upstream: &Matrix<T>, x: &Matrix<T>) -> Result<Vec<f64>> {
    ensure!(upstream.cols() == x.cols(), Shape, "batch sizes differ");
    let grad_w = mixed_matmul(upstream, &x.transpose())?;
    scatter_weight_grad(layer, &grad_w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibConfig {
    pub epochs: usize,
    pub lr: f64,
    pub reassign_every: usize,
    pub batch: usize,
    /// Round half-precision codebooks back onto the fp16 grid after each step.
    pub reround: bool,
    /// Run activation-aware reassignment at all.
    pub reassign: bool,
    /// Record `‖(W − W')x‖²` around each reassignment.
    pub track_activation_loss: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            reassign_every: 1,
            batch: 256,
            reround: true,
            reassign: true,
            track_activation_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ddpm_loss: f64,
    /// Share of assignment indices changed by this step's reassignment.
    pub reassigned_fraction: f64,
    /// Summed over layers, before and after reassignment, when tracked.
    pub activation_loss: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibReport {
    pub steps: Vec<StepLog>,
    /// Mean loss per epoch, starting at epoch 1.
    pub epoch_loss: Vec<(usize, f64)>,
}

impl CalibReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,ddpm_loss,reassigned_fraction\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", s.epoch, s.step, s.ddpm_loss, s.reassigned_fraction));
        }
        out
    }
}

fn activation_loss(w: &Matrix<f32>, w_q: &Matrix<f32>, x: &Matrix<f32>) -> Result<f64> {
    let diff = Matrix::from_raw(
        w.rows(),
        w.cols(),
        w.data().iter().zip(w_q.data()).map(|(a, b)| a - b).collect(),
    );
    Ok(mixed_matmul(&diff, x)?.sq_norm())
}

struct Slot {
    layer: QuantizedLayer,
    /// Full-precision copy the optimizer updates; the live codebook is its
    /// half-precision rounding, so steps smaller than half a unit in the last
    /// place still accumulate.
    master: Vec<f32>,
    original: Matrix<f32>,
    state: OptimizerState,
    half: bool,
}

pub fn calibrate(
    model: &CompressedModel,
    original: &Denoiser,
    data: &Matrix<f32>,
    s: &Schedule,
    cfg: &CalibConfig,
    rng: &mut Rng,
) -> Result<(CompressedModel, CalibReport)> {
    calibrate_with(model, original, data, s, cfg, rng, |_, _| Ok(()))
}

/// Calibrates every codebook layer of `model`. `on_epoch` sees the model
/// before the first epoch (epoch 0) and after every epoch.
pub fn calibrate_with(
    model: &CompressedModel,
    original: &Denoiser,
    data: &Matrix<f32>,
    s: &Schedule,
    cfg: &CalibConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(usize, &CompressedModel) -> Result<()>,
) -> Result<(CompressedModel, CalibReport)> {
    ensure!(cfg.reassign_every >= 1, Argument, "reassign_every must be at least 1");
    ensure!(cfg.batch >= 1, Argument, "batch size must be positive");
    ensure!(
        model.net.shapes() == original.shapes(),
        Argument,
        "original model does not match the quantized architecture"
    );
    model.net.validate()?;
    let mut current = model.clone();
    let mut report = CalibReport::default();
    on_epoch(0, &current)?;
    if cfg.epochs == 0 || data.rows() == 0 {
        return Ok((current, report));
    }
    let count = current.net.layers.len();
    let mut slots: Vec<Option<Slot>> = Vec::with_capacity(count);
    let mut fixed: Vec<Option<Matrix<f32>>> = Vec::with_capacity(count);
    let mut biases = Vec::with_capacity(count);
    for (l, layer) in current.net.layers.iter().enumerate() {
        biases.push(layer.bias.clone().unwrap_or_else(|| vec![0.0; layer.rows()]));
        if layer.weight.has_codebook() {
            let LayerWeight::Float(w) = &original.layers[l].weight else {
                return Err(Error::Argument(format!("original layer {l} is not floating point")));
            };
            let mut q = QuantizedLayer::new(layer)?;
            q.set_calibrating(true);
            let half = !matches!(layer.weight, LayerWeight::Vq { .. });
            slots.push(Some(Slot {
                state: OptimizerState::new(q.params().len(), AdamW::with_lr(cfg.lr)),
                master: q.params().to_vec(),
                layer: q,
                original: w.clone(),
                half,
            }));
            fixed.push(None);
        } else {
            slots.push(None);
            fixed.push(Some(layer.weight.dense()?));
        }
    }
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut x0 = Matrix::zeros(chunk.len(), 2);
            for (r, &i) in chunk.iter().enumerate() {
                x0.row_mut(r).copy_from_slice(data.row(i));
            }
            let batch = noisy_batch::<f32>(&x0, s, rng)?;
            let reassign_now = cfg.reassign && step.is_multiple_of(cfg.reassign_every);
            let (mut changed, mut total_idx) = (0usize, 0usize);
            let mut act = (0.0, 0.0);
            let mut inputs = Vec::with_capacity(count);
            let mut pre = Vec::with_capacity(count);
            let mut weights = Vec::with_capacity(count);
            let mut h = batch.x_t.clone();
            for l in 0..count {
                let w = match &mut slots[l] {
                    Some(slot) => {
                        slot.layer.capture = Some(h.clone());
                        if reassign_now {
                            let before = slot.layer.assignments().clone();
                            if cfg.track_activation_loss {
                                act.0 += activation_loss(&slot.original, &slot.layer.reconstruct()?, &h)?;
                            }
                            let next = reassign(&slot.layer, &slot.original)?;
                            changed += next.indices.iter().zip(&before.indices).filter(|(a, b)| a != b).count();
                            total_idx += next.indices.len();
                            *slot.layer.assignments_mut() = next;
                        }
                        let w = slot.layer.reconstruct()?;
                        if reassign_now && cfg.track_activation_loss {
                            act.1 += activation_loss(&slot.original, &w, &h)?;
                        }
                        w
                    }
                    None => fixed[l].clone().expect("fixed layer weight"),
                };
                let mut z = crate::diffusion::net::linear(&w, &biases[l], &h)?;
                if l == 0 {
                    let emb = time_embedding::<f32>(&batch.ts, z.rows());
                    for (v, &e) in z.data_mut().iter_mut().zip(emb.data()) {
                        *v += e;
                    }
                }
                let next = (l + 1 < count).then(|| z.map(silu));
                inputs.push(std::mem::replace(&mut h, next.unwrap_or_else(|| Matrix::zeros(0, 0))));
                pre.push(z);
                weights.push(w);
            }
            let trace = Trace { inputs, pre };
            let (loss, d_out) = eps_loss(trace.output(), &batch.eps);
            if !loss.is_finite() {
                return Err(Error::Calibration(diagnostic(epoch, step, loss, &slots)));
            }
            let refs: Vec<&Matrix<f32>> = weights.iter().collect();
            let grads = backward_with(&refs, &trace, d_out)?;
            for (l, slot) in slots.iter_mut().enumerate() {
                let Some(slot) = slot else { continue };
                let g = scatter_weight_grad(&slot.layer, &grads.weights[l])?;
                adamw_step(&mut slot.master, &g, &mut slot.state)?;
                let live = slot.layer.params_mut();
                live.copy_from_slice(&slot.master);
                if cfg.reround && slot.half {
                    fp16_round_slice(live);
                }
                if !slot.master.iter().all(|v| v.is_finite()) {
                    return Err(Error::Calibration(diagnostic(epoch, step, loss, &slots)));
                }
            }
            report.steps.push(StepLog {
                epoch,
                step,
                ddpm_loss: loss,
                reassigned_fraction: if total_idx == 0 { 0.0 } else { changed as f64 / total_idx as f64 },
                activation_loss: (reassign_now && cfg.track_activation_loss).then_some(act),
            });
            total += loss;
            batches += 1;
            step += 1;
        }
        report.epoch_loss.push((epoch, total / batches as f64));
        write_back(&mut current, &slots);
        on_epoch(epoch, &current)?;
    }
    Ok((current, report))
}

fn write_back(model: &mut CompressedModel, slots: &[Option<Slot>]) {
    for (layer, slot) in model.net.layers.iter_mut().zip(slots) {
        if let Some(slot) = slot {
            layer.weight = slot.layer.weight.clone();
        }
    }
}

fn diagnostic(epoch: usize, step: usize, loss: f64, slots: &[Option<Slot>]) -> String {
    let mut msg = format!("non-finite state at epoch {epoch}, step {step} (loss {loss})");
    for (l, slot) in slots.iter().enumerate() {
        if let Some(slot) = slot {
            let p = slot.layer.params();
            let bad = p.iter().filter(|v| !v.is_finite()).count();
            let max = p.iter().filter(|v| v.is_finite()).fold(0.0f32, |a, v| a.max(v.abs()));
            msg.push_str(&format!("; layer {l}: {bad} non-finite of {}, max |c| {max}", p.len()));
        }
    }
    msg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{quantize_weight, Method, QuantConfig};
    use crate::numerics::gaussian;

    fn random(m: usize, n: usize, seed: u64) -> Matrix<f32> {
        Matrix::from_vec(m, n, gaussian(&mut Rng::new(seed), m * n)).unwrap()
    }

    fn layer(method: Method, w: &Matrix<f32>, d: usize, k: usize) -> QuantizedLayer {
        let cfg = QuantConfig {
            d,
            k,
            iters: Some(5),
            tau: 0.3,
            ..QuantConfig::preset(method, 2).unwrap()
        };
        let weight = quantize_weight(w, &cfg, &Rng::new(1)).unwrap();
        let bias = (0..w.rows()).map(|i| i as f32 * 0.1).collect();
        QuantizedLayer::new(&Layer { weight, bias: Some(bias) }).unwrap()
    }

    #[test]
    fn forward_matches_reconstruction() {
        let w = random(8, 12, 0);
        let mut q = layer(Method::Pq, &w, 3, 4);
        let x = random(12, 5, 1);
        let y = quantized_forward(&mut q, &x).unwrap();
        let expect = crate::numerics::matmul(&q.reconstruct().unwrap(), &x).unwrap();
        for i in 0..8 {
            for b in 0..5 {
                assert!((y.get(i, b) - expect.get(i, b) - q.bias[i]).abs() < 1e-5);
            }
        }
        assert!(q.capture.is_none());
        let zero = quantized_forward(&mut q, &Matrix::zeros(12, 2)).unwrap();
        assert_eq!(zero.row(3), &[0.3f32, 0.3]);
        assert!(quantized_forward(&mut q, &Matrix::zeros(11, 2)).is_err());
    }

    #[test]
    fn reassign_requires_capture() {
        let w = random(4, 8, 0);
        let mut q = layer(Method::Vq, &w, 2, 4);
        assert!(matches!(reassign(&q, &w), Err(Error::State(_))));
        q.set_calibrating(true);
        quantized_forward(&mut q, &random(8, 3, 2)).unwrap();
        assert!(reassign(&q, &w).is_ok());
    }

    #[test]
    fn isometric_activations_give_euclidean_assignment() {
        let w = random(16, 8, 3);
        for method in [Method::Vq, Method::Pq, Method::Dpq] {
            let mut q = layer(method, &w, 4, 8);
            // Perturb so that the current assignment is not already optimal.
            for v in q.params_mut() {
                *v *= 0.7;
            }
            let x = {
                let mut x = Matrix::zeros(8, 4);
                for j in 0..2 {
                    for a in 0..4 {
                        x.set(j * 4 + a, a, 1.0);
                    }
                }
                x
            };
            let got = reassign_with(&q, &w, &x).unwrap();
            for i in 0..16 {
                for j in 0..2 {
                    let sub = &w.row(i)[j * 4..(j + 1) * 4];
                    let best = (0..q.k())
                        .min_by(|&a, &b| {
                            let da = crate::numerics::l2_sq(sub, q.candidate(j, a)).unwrap();
                            let db = crate::numerics::l2_sq(sub, q.candidate(j, b)).unwrap();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    let (dg, db) = (
                        crate::numerics::l2_sq(sub, q.candidate(j, got.get(i, j))).unwrap(),
                        crate::numerics::l2_sq(sub, q.candidate(j, best)).unwrap(),
                    );
                    assert!(dg <= db + 1e-6, "{method}: ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn zero_activation_group_keeps_index() {
        let w = random(6, 8, 4);
        let q = layer(Method::Pq, &w, 4, 4);
        let mut x = random(8, 5, 5);
        for r in 0..4 {
            x.row_mut(r).fill(0.0);
        }
        let got = reassign_with(&q, &w, &x).unwrap();
        for i in 0..6 {
            assert_eq!(got.get(i, 0), q.assignments().get(i, 0));
        }
    }

    #[test]
    fn reassignment_is_termwise_optimal() {
        let w = random(10, 12, 6);
        let x = random(12, 7, 7);
        for method in [Method::Vq, Method::Pq, Method::Dpq] {
            let q = layer(method, &w, 3, 6);
            let grams = group_grams(&x, 3);
            let got = reassign_with(&q, &w, &x).unwrap();
            for i in 0..10 {
                for j in 0..4 {
                    let sub = &w.row(i)[j * 3..(j + 1) * 3];
                    let chosen = activation_cost(sub, q.candidate(j, got.get(i, j)), &grams[j]);
                    let prior = activation_cost(sub, q.candidate(j, q.assignments().get(i, j)), &grams[j]);
                    assert!(chosen <= prior + 1e-9 * prior.abs().max(1.0));
                    for p in 0..q.k() {
                        let other = activation_cost(sub, q.candidate(j, p), &grams[j]);
                        assert!(chosen <= other + 1e-9 * other.abs().max(1.0), "{method}");
                    }
                }
            }
        }
    }

    #[test]
    fn empty_centroid_has_zero_gradient() {
        let w = random(4, 4, 8);
        let mut q = layer(Method::Pq, &w, 2, 4);
        // Route everything in subspace 0 to codeword 0.
        let LayerWeight::Pq { assignments, .. } = &mut q.weight else { unreachable!() };
        for i in 0..4 {
            assignments.set(i, 0, 0);
        }
        let g = codebook_grad(&q, &random(4, 3, 9).cast::<f64>(), &random(4, 3, 10).cast::<f64>()).unwrap();
        for p in 1..4 {
            assert!(g[p * 2..p * 2 + 2].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_row_gradient_closed_form() {
        let w = Matrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let q = layer(Method::Vq, &w, 2, 1);
        let up = Matrix::from_vec(1, 1, vec![3.0f64]).unwrap();
        let x = Matrix::from_vec(2, 1, vec![0.25f64, -2.0]).unwrap();
        assert_eq!(codebook_grad(&q, &up, &x).unwrap(), vec![0.75, -6.0]);
    }

    fn layer_loss(q: &QuantizedLayer, x: &Matrix<f64>, target: &Matrix<f64>) -> f64 {
        let w = q.reconstruct().unwrap();
        let y = crate::diffusion::net::linear(&w, &q.bias, x).unwrap();
        y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let w = random(6, 8, 11);
        let x = random(8, 4, 12).cast::<f64>();
        let target = random(6, 4, 13).cast::<f64>();
        for method in [Method::Vq, Method::Pq, Method::Dpq] {
            let q = layer(method, &w, 2, 4);
            let y = crate::diffusion::net::linear(&q.reconstruct().unwrap(), &q.bias, &x).unwrap();
            let up = y.map_indexed(|r, c, v| 2.0 * (v - target.get(r, c)));
            let g = codebook_grad(&q, &up, &x).unwrap();
            for idx in 0..q.params().len() {
                let eval = |delta: f32| {
                    let mut p = q.clone();
                    p.params_mut()[idx] += delta;
                    (p.params()[idx] as f64, layer_loss(&p, &x, &target))
                };
                let ((up_at, fu), (down_at, fd)) = (eval(1e-3), eval(-1e-3));
                let numeric = (fu - fd) / (up_at - down_at);
                let rel = (numeric - g[idx]).abs() / numeric.abs().max(g[idx].abs()).max(1e-7);
                assert!(rel < 1e-4, "{method} param {idx}: {} vs {numeric}", g[idx]);
            }
        }
    }

    #[test]
    fn zero_epochs_leave_the_model() {
        let s = Schedule::default();
        let fp = Denoiser::new(24, 2, &mut Rng::new(0)).unwrap();
        let base = CompressedModel {
            meta: crate::model::ModelMeta::new(&s, 0),
            net: fp.clone(),
        };
        let cfg = QuantConfig {
            k: 8,
            iters: Some(3),
            ..QuantConfig::preset(Method::Dpq, 2).unwrap()
        };
        let q = crate::model::compress(&base, &cfg, &Rng::new(1)).unwrap();
        let data = random(64, 2, 1);
        let calib = CalibConfig {
            epochs: 0,
            ..CalibConfig::default()
        };
        let (out, report) = calibrate(&q, &fp, &data, &s, &calib, &mut Rng::new(2)).unwrap();
        assert_eq!(out, q);
        assert!(report.steps.is_empty());
    }

    #[test]
    fn calibration_is_deterministic_and_logs() {
        let s = Schedule::default();
        let fp = Denoiser::new(24, 3, &mut Rng::new(0)).unwrap();
        let base = CompressedModel {
            meta: crate::model::ModelMeta::new(&s, 0),
            net: fp.clone(),
        };
        let cfg = QuantConfig {
            k: 8,
            iters: Some(3),
            ..QuantConfig::preset(Method::Dpq, 2).unwrap()
        };
        let q = crate::model::compress(&base, &cfg, &Rng::new(1)).unwrap();
        let data = random(100, 2, 1);
        let calib = CalibConfig {
            epochs: 2,
            batch: 32,
            lr: 1e-3,
            track_activation_loss: true,
            ..CalibConfig::default()
        };
        let mut seen = vec![];
        let run = |seen: &mut Vec<usize>| {
            calibrate_with(&q, &fp, &data, &s, &calib, &mut Rng::new(2), |e, _| {
                seen.push(e);
                Ok(())
            })
            .unwrap()
        };
        let (a, ra) = run(&mut seen);
        let (b, rb) = run(&mut vec![]);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(ra.steps.len(), 8);
        assert!(ra.steps.iter().all(|s| s.activation_loss.is_some()));
        assert_ne!(a, q);
        let csv = ra.to_csv();
        assert!(csv.starts_with("epoch,step,ddpm_loss,reassigned_fraction\n"));
        assert_eq!(csv.lines().count(), 9);
        // Pool entries stay on the half-precision grid.
        for layer in &a.net.layers {
            if let LayerWeight::Pooled { pool, .. } = &layer.weight {
                assert!(pool.entries.iter().all(|&v| crate::numerics::fp16_round(v) == v));
            }
        }
    }
}
