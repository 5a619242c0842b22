//! Adaptive block floating-point arithmetic for a simulated analog
//! matmul device: shared-scale vector quantization, tiled matrix products
//! with gain and output-stage noise, error analysis against float32, and a
//! small neural-network stack with noise-aware finetuning.

pub mod analysis;
pub mod bf16;
pub mod device;
pub mod error;
pub mod finetune;
pub mod hist;
pub mod im2col;
pub mod nn;
pub mod quant;
pub mod rng;

pub use bf16::Bf16;
pub use device::{AbfpVector, DeviceConfig, NoiseModel, PartialOutput};
pub use error::{AbfpError, Result};
pub use quant::QuantSpec;
