//! AdamW with decoupled weight decay. Moments are kept in double precision
//! while parameters stay `f32`.

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize, hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

pub fn adamw_step(params: &mut [f32], grad: &[f64], st: &mut OptimizerState) -> Result<()> {
    ensure!(
        params.len() == grad.len() && grad.len() == st.m.len(),
        Shape,
        "optimizer shapes disagree: {} params, {} grads, {} moments",
        params.len(),
        grad.len(),
        st.m.len()
    );
    st.step += 1;
    let h = st.hyper;
    let c1 = 1.0 - h.beta1.powi(st.step as i32);
    let c2 = 1.0 - h.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * g;
        st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * g * g;
        let mut p = params[i] as f64;
        p -= h.lr * h.weight_decay * p;
        p -= h.lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + h.eps);
        params[i] = p as f32;
    }
    Ok(())
}
