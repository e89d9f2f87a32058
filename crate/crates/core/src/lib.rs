//! Post-training compression of diffusion-model weights by product
//! quantization with a shared per-layer codebook pool, on a small 2D
//! diffusion testbed.

pub mod calibration;
pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod pool;
pub mod quantizers;

pub use error::{Error, Result};
pub use model::{compress, quantize_model, CompressedModel, Layer, LayerWeight, Method, ModelMeta, QuantConfig};
pub use numerics::{Matrix, Rng};
