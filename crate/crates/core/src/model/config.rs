use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the two-branch encoder, fusion module and heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Series length `T`.
    pub seq_len: usize,
    /// Channels `d`.
    pub channels: usize,
    pub num_classes: usize,
    /// Patch length `P`.
    pub patch_len: usize,
    /// Patch stride `S`.
    pub stride: usize,
    /// Transformer width `D`.
    pub d_model: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    /// Local-encoder kernel sizes, strictly increasing.
    pub kernel_sizes: Vec<usize>,
    /// Convolution stages `K` per local encoder.
    pub stages: usize,
    pub d_emb: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Hidden width of the domain discriminator.
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 128,
            channels: 3,
            num_classes: 6,
            patch_len: 16,
            stride: 8,
            d_model: 64,
            transformer_layers: 8,
            transformer_heads: 4,
            kernel_sizes: vec![4, 8, 16],
            stages: 3,
            d_emb: 64,
            d_k: 64,
            d_v: 64,
            disc_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.seq_len == 0 || self.channels == 0 {
            return bad("seq_len and channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.patch_len == 0 || self.patch_len > self.seq_len {
            return bad(format!(
                "patch_len {} must lie in [1, seq_len={}]",
                self.patch_len, self.seq_len
            ));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return bad(format!("stride {} must lie in [1, patch_len]", self.stride));
        }
        if self.d_model == 0 || self.transformer_heads == 0 || !self.d_model.is_multiple_of(self.transformer_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.transformer_heads
            ));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "kernel_sizes {:?} must be non-empty and strictly increasing",
                self.kernel_sizes
            ));
        }
        if self.kernel_sizes[0] == 0 || self.stages == 0 {
            return bad("kernel sizes and stages must be positive".into());
        }
        let div = 1usize << (self.stages - 1);
        if self.d_emb < div || !self.d_emb.is_multiple_of(div) {
            return bad(format!(
                "d_emb {} must be divisible by 2^(stages-1) = {div}",
                self.d_emb
            ));
        }
        let kmax = *self.kernel_sizes.last().unwrap();
        if self.stages * (kmax - 1) >= self.seq_len {
            return bad(format!(
                "{} stages of kernel {kmax} exceed seq_len {}",
                self.stages, self.seq_len
            ));
        }
        if self.d_k == 0 || self.d_v == 0 || self.disc_hidden == 0 {
            return bad("attention and head widths must be positive".into());
        }
        Ok(())
    }

    /// Number of patches `M = ceil((T − P) / S) + 1`.
    pub fn num_patches(&self) -> usize {
        super::patch::num_patches(self.seq_len, self.patch_len, self.stride)
    }

    /// Output lengths `T − K·(kernel − 1)` of the local encoders.
    pub fn local_lengths(&self) -> Vec<usize> {
        self.kernel_sizes
            .iter()
            .map(|&k| self.seq_len - self.stages * (k - 1))
            .collect()
    }

    /// Channel width after each stage: `d_emb / 2^(K−s)` for stage `s = 1..=K`.
    pub fn stage_widths(&self) -> Vec<usize> {
        (1..=self.stages).map(|s| self.d_emb >> (self.stages - s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 15);
        assert_eq!(c.local_lengths(), vec![119, 107, 83]);
        assert_eq!(c.stage_widths(), vec![16, 32, 64]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig {
            stride: 17,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.stride = 8;
        c.kernel_sizes = vec![8, 4];
        assert!(c.validate().is_err());
        c.kernel_sizes = vec![4, 8, 64];
        assert!(c.validate().is_err());
        c.kernel_sizes = vec![4];
        c.d_model = 30;
        assert!(c.validate().is_err());
    }
}
