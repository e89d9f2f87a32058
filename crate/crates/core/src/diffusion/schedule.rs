use crate::error::{ensure, Result};
use crate::numerics::Matrix;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear beta schedule. Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of `1 − β` up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

impl Default for Schedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    ensure!(steps >= 1, Argument, "schedule needs at least one step");
    ensure!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        Argument,
        "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
    );
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut acc = 1.0;
    let alpha_bars = alphas
        .iter()
        .map(|a| {
            acc *= a;
            acc
        })
        .collect();
    Ok(Schedule {
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
    })
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε` for every point.
pub fn q_sample(x0: &Matrix<f32>, t: usize, eps: &Matrix<f32>, s: &Schedule) -> Result<Matrix<f32>> {
    ensure!(
        (1..=s.steps()).contains(&t),
        Argument,
        "timestep {t} outside 1..={}",
        s.steps()
    );
    ensure!(x0.shape() == eps.shape(), Shape, "noise shape does not match data");
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Ok(Matrix::from_raw(x0.rows(), x0.cols(), data))
}
