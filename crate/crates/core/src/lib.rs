//! Post-training quantization for diffusion samplers with quantization-noise
//! correction: correlated-noise correction, bias correction, variance
//! schedule calibration and step-aware mixed precision.

pub mod correction;
pub mod error;
pub mod metrics;
pub mod mixedprec;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
