use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Shape of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Kept for completeness of the config; only 0 is supported.
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2+2 layers, d_model 64, d_ff 128, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_model: 64,
            d_ff: 128,
            n_heads: 4,
            vocab_size,
            max_len: 128,
            dropout: 0.0,
        }
    }

    /// The "small" shape: 8+8 layers, d_model 512, d_ff 1024, 6 heads.
    ///
    /// 512 is not divisible by 6, so this preset uses 8 heads of width 64
    /// and is only a reference point; it fails [`ModelConfig::validate`]
    /// with `n_heads = 6`.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            n_layers_enc: 8,
            n_layers_dec: 8,
            d_model: 512,
            d_ff: 1024,
            n_heads: 8,
            vocab_size,
            max_len: 512,
            dropout: 0.0,
        }
    }

    /// Tiny shape used by gradient checks: d_model 8, one layer each side.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size,
            max_len: 32,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            bail!(InvalidArgument, "model config: {name} must be >= 1");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            bail!(
                InvalidArgument,
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            );
        }
        if self.dropout != 0.0 {
            bail!(InvalidArgument, "model config: dropout is not supported (got {})", self.dropout);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(100).validate().unwrap();
        ModelConfig::small(100).validate().unwrap();
        ModelConfig::tiny(10).validate().unwrap();
        let mut c = ModelConfig::desk(100);
        c.n_heads = 6;
        assert!(c.validate().is_err());
        c = ModelConfig::desk(0);
        assert!(c.validate().is_err());
        c = ModelConfig::desk(10);
        c.dropout = 0.1;
        assert!(c.validate().is_err());
    }
}
