use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Radius of the eight-gaussians ring before standardization.
const RING_RADIUS: f64 = 2.0;
/// Per-mode standard deviation before standardization.
const MODE_STD: f64 = 0.2;

pub const DATASETS: [&str; 3] = ["eight-gaussians", "swiss-roll", "two-moons"];

/// A standardized 2D point cloud. For mixture datasets `modes` holds the
/// component centres in the standardized frame and `mode_sigma` their spread.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub name: String,
    pub points: Matrix<f32>,
    pub modes: Option<Vec<[f32; 2]>>,
    pub mode_sigma: f32,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

fn ring_centre(i: usize) -> (f64, f64) {
    let theta = i as f64 * std::f64::consts::FRAC_PI_4;
    (RING_RADIUS * theta.cos(), RING_RADIUS * theta.sin())
}

/// Mode centres and spread of eight-gaussians under the population (not
/// sample) standardization. Used when only sample files are at hand.
pub fn eight_gaussian_reference_modes() -> (Vec<[f32; 2]>, f32) {
    let std = (RING_RADIUS * RING_RADIUS / 2.0 + MODE_STD * MODE_STD).sqrt();
    let modes = (0..8)
        .map(|i| {
            let (x, y) = ring_centre(i);
            [(x / std) as f32, (y / std) as f32]
        })
        .collect();
    (modes, (MODE_STD / std) as f32)
}

pub fn toy_dataset(name: &str, n: usize, rng: &mut Rng) -> Result<ToyDataset> {
    let mut raw: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut centres = None;
    match name {
        "eight-gaussians" => {
            for _ in 0..n {
                let (cx, cy) = ring_centre(rng.below(8));
                raw.push([cx + MODE_STD * rng.normal(), cy + MODE_STD * rng.normal()]);
            }
            centres = Some((0..8).map(ring_centre).collect::<Vec<_>>());
        }
        "swiss-roll" => {
            for _ in 0..n {
                let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.uniform());
                raw.push([
                    t * t.cos() / 5.0 + 0.1 * rng.normal(),
                    t * t.sin() / 5.0 + 0.1 * rng.normal(),
                ]);
            }
        }
        "two-moons" => {
            for _ in 0..n {
                let t = std::f64::consts::PI * rng.uniform();
                let (x, y) = if rng.uniform() < 0.5 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                raw.push([x + 0.05 * rng.normal(), y + 0.05 * rng.normal()]);
            }
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown dataset '{other}' (expected one of {})",
                DATASETS.join(", ")
            )))
        }
    }
    let count = n.max(1) as f64;
    let mut mean = [0.0f64; 2];
    for p in &raw {
        mean[0] += p[0] / count;
        mean[1] += p[1] / count;
    }
    let mut std = [0.0f64; 2];
    for p in &raw {
        std[0] += (p[0] - mean[0]).powi(2) / count;
        std[1] += (p[1] - mean[1]).powi(2) / count;
    }
    let std = std.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let data = raw
        .iter()
        .flat_map(|p| [((p[0] - mean[0]) / std[0]) as f32, ((p[1] - mean[1]) / std[1]) as f32])
        .collect();
    let modes = centres.map(|c| {
        c.iter()
            .map(|&(x, y)| [((x - mean[0]) / std[0]) as f32, ((y - mean[1]) / std[1]) as f32])
            .collect()
    });
    Ok(ToyDataset {
        name: name.to_string(),
        points: Matrix::from_raw(n, 2, data),
        modes,
        mode_sigma: (MODE_STD / (0.5 * (std[0] + std[1]))) as f32,
    })
}
