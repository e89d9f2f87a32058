//! Ancestral DDPM and DDIM samplers.
//!
//! Chains run in blocks of [`CHAIN_BLOCK`]; block `b` draws all of its noise
//! from `rng.fork(b)`, so results do not depend on the worker count.

use super::net::{NoisePredictor, DATA_DIM};
use super::schedule::Schedule;
use crate::error::{ensure, Result};
use crate::numerics::{gaussian, Matrix, Rng};
use crate::par;

pub const CHAIN_BLOCK: usize = 256;

/// Uniformly strided timesteps `ceil(i·T/S)` for `i = 1..=S`, ascending.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(steps >= 1, Argument, "sampler needs at least one step");
    ensure!(steps <= total, Argument, "{steps} steps exceed schedule length {total}");
    Ok((1..=steps).map(|i| (i * total).div_ceil(steps)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Update {
    /// Ancestral step with the respaced posterior variance.
    Ddpm,
    Ddim { eta: f64 },
}

/// Moves `x` (points, `N x 2`) from timestep `t` to `prev < t` given the
/// predicted noise. `noise` is consulted only when the step is stochastic.
pub fn reverse_step(
    update: Update,
    s: &Schedule,
    t: usize,
    prev: usize,
    x: &mut Matrix<f32>,
    eps: &Matrix<f32>,
    rng: &mut Rng,
) {
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(prev);
    let ratio = ab_t / ab_prev;
    let (c_x, c_eps, sigma) = match update {
        Update::Ddpm => {
            let beta = 1.0 - ratio;
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            (1.0 / ratio.sqrt(), -beta / (ratio.sqrt() * (1.0 - ab_t).sqrt()), var.max(0.0).sqrt())
        }
        Update::Ddim { eta } => {
            let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ratio)).max(0.0).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            // x_prev = √ᾱ_prev·x̂0 + dir·ε with x̂0 = (x − √(1−ᾱ_t)·ε)/√ᾱ_t
            let c_x = (ab_prev / ab_t).sqrt();
            (c_x, dir - c_x * (1.0 - ab_t).sqrt(), sigma)
        }
    };
    let noise = if sigma > 0.0 {
        Some(gaussian(rng, x.data().len()))
    } else {
        None
    };
    for (i, (v, &e)) in x.data_mut().iter_mut().zip(eps.data()).enumerate() {
        let mut next = c_x * *v as f64 + c_eps * e as f64;
        if let Some(z) = &noise {
            next += sigma * z[i] as f64;
        }
        *v = next as f32;
    }
}

/// Runs a chain block from `x` through descending `ts`, ending at `t = 0`.
fn run_chain<M: NoisePredictor + ?Sized>(
    model: &M,
    s: &Schedule,
    ts: &[usize],
    update: Update,
    mut x: Matrix<f32>,
    rng: &mut Rng,
) -> Matrix<f32> {
    for (i, &t) in ts.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = model.predict_eps(&x, t);
        reverse_step(update, s, t, prev, &mut x, &eps, rng);
    }
    x
}

fn sample_blocks<M: NoisePredictor + ?Sized>(
    model: &M,
    s: &Schedule,
    ts: &[usize],
    update: Update,
    start: Option<&Matrix<f32>>,
    n: usize,
    rng: &Rng,
) -> Matrix<f32> {
    let blocks = n.div_ceil(CHAIN_BLOCK);
    let parts = par::map_range(blocks, |b| {
        let mut block_rng = rng.fork(b as u64);
        let lo = b * CHAIN_BLOCK;
        let rows = CHAIN_BLOCK.min(n - lo);
        let x = match start {
            Some(x_t) => Matrix::from_raw(
                rows,
                DATA_DIM,
                x_t.data()[lo * DATA_DIM..(lo + rows) * DATA_DIM].to_vec(),
            ),
            None => Matrix::from_raw(rows, DATA_DIM, gaussian(&mut block_rng, rows * DATA_DIM)),
        };
        run_chain(model, s, ts, update, x, &mut block_rng)
    });
    let mut data = Vec::with_capacity(n * DATA_DIM);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Matrix::from_raw(n, DATA_DIM, data)
}

/// Full-length ancestral sampling from `x_T ~ N(0, I)`.
pub fn ddpm_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    s: &Schedule,
    n: usize,
    rng: &Rng,
) -> Matrix<f32> {
    let ts: Vec<usize> = (1..=s.steps()).collect();
    sample_blocks(model, s, &ts, Update::Ddpm, None, n, rng)
}

/// Ancestral sampling over a strided sub-schedule of `steps` timesteps.
pub fn ddpm_sample_respaced<M: NoisePredictor + ?Sized>(
    model: &M,
    s: &Schedule,
    steps: usize,
    n: usize,
    rng: &Rng,
) -> Result<Matrix<f32>> {
    let ts = strided_timesteps(s.steps(), steps)?;
    Ok(sample_blocks(model, s, &ts, Update::Ddpm, None, n, rng))
}

pub fn ddim_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    s: &Schedule,
    steps: usize,
    eta: f64,
    n: usize,
    rng: &Rng,
) -> Result<Matrix<f32>> {
    ensure!((0.0..=1.0).contains(&eta), Argument, "eta must lie in [0, 1], got {eta}");
    let ts = strided_timesteps(s.steps(), steps)?;
    Ok(sample_blocks(model, s, &ts, Update::Ddim { eta }, None, n, rng))
}

/// DDIM from given starting points `x_T` (`N x 2`).
pub fn ddim_sample_from<M: NoisePredictor + ?Sized>(
    model: &M,
    s: &Schedule,
    steps: usize,
    eta: f64,
    x_t: &Matrix<f32>,
    rng: &Rng,
) -> Result<Matrix<f32>> {
    ensure!((0.0..=1.0).contains(&eta), Argument, "eta must lie in [0, 1], got {eta}");
    ensure!(x_t.cols() == DATA_DIM, Shape, "starting points must have {DATA_DIM} columns");
    let ts = strided_timesteps(s.steps(), steps)?;
    Ok(sample_blocks(model, s, &ts, Update::Ddim { eta }, Some(x_t), x_t.rows(), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    /// Predicts the exact noise that maps a fixed target to `x`.
    struct Oracle {
        target: [f32; 2],
        s: Schedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_eps(&self, x: &Matrix<f32>, t: usize) -> Matrix<f32> {
            let ab = self.s.alpha_bar(t);
            x.map_indexed(|_, c, v| {
                ((v as f64 - ab.sqrt() * self.target[c] as f64) / (1.0 - ab).sqrt()) as f32
            })
        }
    }

    #[test]
    fn strides() {
        assert_eq!(strided_timesteps(1000, 4).unwrap(), vec![250, 500, 750, 1000]);
        assert_eq!(strided_timesteps(10, 3).unwrap(), vec![4, 7, 10]);
        assert_eq!(strided_timesteps(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert!(strided_timesteps(10, 0).is_err());
        assert!(strided_timesteps(10, 11).is_err());
    }

    #[test]
    fn single_step_oracle_recovers_target() {
        let s = make_schedule(1, 1e-4, 1e-4).unwrap();
        let oracle = Oracle {
            target: [0.7, -1.3],
            s: s.clone(),
        };
        let out = ddpm_sample(&oracle, &s, 5, &Rng::new(2));
        for i in 0..5 {
            assert!((out.get(i, 0) - 0.7).abs() < 1e-4);
            assert!((out.get(i, 1) + 1.3).abs() < 1e-4);
        }
    }

    #[test]
    fn one_step_ddim_is_the_x0_estimate() {
        let s = Schedule::default();
        let oracle = Oracle {
            target: [0.25, 2.0],
            s: s.clone(),
        };
        let x_t = Matrix::from_vec(3, 2, vec![1.0, -1.0, 0.5, 0.0, -2.0, 3.0]).unwrap();
        let out = ddim_sample_from(&oracle, &s, 1, 0.0, &x_t, &Rng::new(0)).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 0.25).abs() < 1e-3, "{}", out.get(i, 0));
            assert!((out.get(i, 1) - 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn deterministic_without_noise() {
        let s = Schedule::default();
        let oracle = Oracle {
            target: [0.0, 1.0],
            s: s.clone(),
        };
        let a = ddim_sample(&oracle, &s, 20, 0.0, 600, &Rng::new(9)).unwrap();
        let b = ddim_sample(&oracle, &s, 20, 0.0, 600, &Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = ddpm_sample_respaced(&oracle, &s, 20, 600, &Rng::new(9)).unwrap();
        let d = ddpm_sample_respaced(&oracle, &s, 20, 600, &Rng::new(9)).unwrap();
        assert_eq!(c, d);
        assert!(ddim_sample(&oracle, &s, 0, 0.0, 4, &Rng::new(9)).is_err());
        assert!(ddim_sample(&oracle, &s, 4, 1.5, 4, &Rng::new(9)).is_err());
    }
}
