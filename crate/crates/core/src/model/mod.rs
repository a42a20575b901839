//! Transformer encoder-decoder over subsampled feature sequences.
//!
//! The encoder front end is a two-stage convolution + stride-2 max-pooling
//! subsampler (4x reduction along time), followed by sinusoidal positional
//! encoding and post-norm Transformer blocks. The decoder embeds token
//! prefixes, applies masked self-attention and source-target attention, and
//! emits one next-token distribution per prefix position.

mod forward;
mod params;

pub use forward::{
    add_positional_encoding, bind_model, conv_subsample, decoder_forward, encoder_forward,
    forward_probs, BoundModel, DropoutCtx, Memory,
};
pub use params::{
    AttentionParams, ConvParams, DecoderBlockParams, EncoderBlockParams, FfnParams, LinearParams,
    ModelParams, NormParams, SubsamplerParams,
};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Padding token id, fixed across all file formats.
pub const PAD: usize = 0;
/// Start-of-sequence token id.
pub const SOS: usize = 1;
/// End-of-sequence token id.
pub const EOS: usize = 2;
/// First id usable for ordinary symbols.
pub const FIRST_CONTENT_TOKEN: usize = 3;

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    /// Large-scale reference configuration: 8 encoder and 6 decoder blocks,
    /// 256-dim representations, 2048-dim feed-forward inner layers, 4 heads,
    /// dropout 0.1.
    fn default() -> Self {
        ModelConfig {
            num_encoder_blocks: 8,
            num_decoder_blocks: 6,
            model_dim: 256,
            ffn_dim: 2048,
            num_heads: 4,
            vocab_size: 3262,
            feature_dim: 120,
            dropout_rate: 0.1,
            max_positions: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_encoder_blocks < 1 || self.num_decoder_blocks < 1 {
            return Err(Error::Config(format!(
                "need at least one encoder and decoder block, got {}/{}",
                self.num_encoder_blocks, self.num_decoder_blocks
            )));
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} too small: needs PAD, SOS, EOS plus one symbol",
                self.vocab_size
            )));
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config(alloc::string::String::from(
                "feature_dim, ffn_dim and max_positions must be positive",
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Subsampled length after the two stride-2 pooling stages.
pub fn subsampled_len(m: usize) -> usize {
    m.div_ceil(2).div_ceil(2)
}

/// Sinusoidal positional-encoding table, rows 0..len.
///
/// Even channels carry sin(pos / 10000^(c/d)), odd channels the cosine at
/// the same frequency; parameter-free and deterministic.
pub fn positional_table(len: usize, dim: usize) -> Vec<f64> {
    let mut table = alloc::vec![0.0; len * dim];
    for pos in 0..len {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / dim as f64);
            table[pos * dim + c] = if c % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampled_lengths() {
        assert_eq!(subsampled_len(16), 4);
        assert_eq!(subsampled_len(4), 1);
        assert_eq!(subsampled_len(10), 3);
    }

    #[test]
    fn positional_row_zero_closed_form() {
        let t = positional_table(1, 8);
        for c in 0..8 {
            let expect = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(t[c], expect, "channel {c}");
        }
    }

    #[test]
    fn positional_table_matches_independent_recomputation() {
        // Recompute the standard sinusoid formula directly.
        let (len, dim) = (7, 6);
        let t = positional_table(len, dim);
        for pos in 0..len {
            for c in 0..dim {
                let freq = 1.0 / libm::pow(10000.0, (2 * (c / 2)) as f64 / dim as f64);
                let expect = if c % 2 == 0 {
                    libm::sin(pos as f64 * freq)
                } else {
                    libm::cos(pos as f64 * freq)
                };
                assert!((t[pos * dim + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.vocab_size = 3;
        assert!(cfg.validate().is_err());
        cfg.vocab_size = 8;
        cfg.model_dim = 10;
        cfg.num_heads = 4;
        assert!(cfg.validate().is_err());
    }
}
