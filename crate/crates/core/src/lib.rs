//! pQRNN-MAtt: a projection-based QRNN encoder with a merged-attention
//! pointer-generator decoder, trained with simulated 8-bit quantization and
//! served through integer kernels.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod model_store;
pub mod numerics;
pub mod parallel;
pub mod pointer_generator;
pub mod projection;
pub mod quantization;
pub mod quantized_model;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
