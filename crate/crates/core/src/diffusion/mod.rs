//! A small denoising diffusion model on 2D point clouds: noise schedule,
//! forward corruption, the noise-prediction loss, a fully connected denoiser
//! with hand-written backpropagation, DDPM/DDIM samplers and toy datasets.

pub mod data;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use data::{toy_dataset, ToyDataset};
pub use net::{DenseNet, Denoiser, NoisePredictor};
pub use sampler::{ddim_sample, ddim_sample_from, ddpm_sample, ddpm_sample_respaced, strided_timesteps};
pub use schedule::{make_schedule, q_sample, Schedule};
pub use train::{ddpm_loss, train_denoiser, TrainConfig, TrainReport};
