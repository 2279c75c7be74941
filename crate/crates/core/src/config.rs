//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::ProjectionConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub bottleneck_dim: usize,
    pub qrnn_layers: usize,
    pub qrnn_state: usize,
    pub kernel_width: usize,
    pub bidirectional: bool,
    pub max_source_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            bottleneck_dim: 256,
            qrnn_layers: 4,
            qrnn_state: 128,
            kernel_width: 2,
            bidirectional: true,
            max_source_len: 128,
        }
    }
}

impl EncoderConfig {
    /// Width of the final encoder states.
    pub fn output_dim(&self) -> usize {
        self.qrnn_state * if self.bidirectional { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dim == 0 || self.qrnn_layers == 0 || self.qrnn_state == 0 || self.kernel_width == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be positive".into()));
        }
        if self.max_source_len == 0 {
            return Err(Error::InvalidArgument("max_source_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub embedding_dim: usize,
    pub copy_heads: usize,
    pub max_target_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 4,
            model_dim: 128,
            ffn_dim: 1024,
            heads: 4,
            embedding_dim: 128,
            copy_heads: 4,
            max_target_len: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 || self.copy_heads == 0 {
            return Err(Error::InvalidArgument("decoder dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 || self.model_dim % self.copy_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} must be divisible by heads {} and copy_heads {}",
                self.model_dim, self.heads, self.copy_heads
            )));
        }
        if self.embedding_dim != self.model_dim {
            return Err(Error::InvalidArgument(format!(
                "embedding_dim {} must equal model_dim {}",
                self.embedding_dim, self.model_dim
            )));
        }
        if self.max_target_len == 0 {
            return Err(Error::InvalidArgument("max_target_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub projection: ProjectionConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            projection: ProjectionConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small model for desk-scale training runs: QRNN state 64, two QRNN
    /// layers, two decoder layers.
    pub fn reduced() -> Self {
        ModelConfig {
            projection: ProjectionConfig::default(),
            encoder: EncoderConfig {
                bottleneck_dim: 128,
                qrnn_layers: 2,
                qrnn_state: 64,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                layers: 2,
                model_dim: 64,
                ffn_dim: 256,
                embedding_dim: 64,
                ..DecoderConfig::default()
            },
        }
    }

    /// Tiny model used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            projection: ProjectionConfig {
                feature_dim: 64,
                ..ProjectionConfig::default()
            },
            encoder: EncoderConfig {
                bottleneck_dim: 16,
                qrnn_layers: 1,
                qrnn_state: 8,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                layers: 1,
                model_dim: 8,
                ffn_dim: 16,
                heads: 4,
                embedding_dim: 8,
                copy_heads: 4,
                max_target_len: 16,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()
    }
}
