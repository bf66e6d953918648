use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Conformer encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Kernel of the causal front-end conv and of every depthwise conv.
    pub conv_kernel: usize,
    pub frontend_dim: usize,
    /// Key/value cache bound used when streaming with unbounded look-back.
    pub streaming_lb_cap_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            n_blocks: 4,
            d_model: 144,
            d_ff: 576,
            n_heads: 4,
            conv_kernel: 15,
            frontend_dim: 512,
            streaming_lb_cap_frames: 135,
        }
    }

    /// 18 blocks of width 512.
    pub fn preset_200m() -> Self {
        Self {
            n_blocks: 18,
            d_model: 512,
            d_ff: 2048,
            n_heads: 8,
            ..Self::toy()
        }
    }

    /// 20 blocks of width 2048.
    pub fn preset_2b() -> Self {
        Self {
            n_blocks: 20,
            d_model: 2048,
            d_ff: 8192,
            n_heads: 16,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "200m" => Some(Self::preset_200m()),
            "2b" => Some(Self::preset_2b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(format!("encoder.{k}"), m));
        if self.n_blocks == 0 {
            return bad("n_blocks", "must be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(
                "n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            );
        }
        if self.conv_kernel < 3 || self.conv_kernel % 2 == 0 {
            return bad("conv_kernel", format!("must be odd and >= 3, got {}", self.conv_kernel));
        }
        if self.d_ff == 0 || self.frontend_dim == 0 {
            return bad("d_ff", "dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["toy", "200m", "2b"] {
            EncoderConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(EncoderConfig::preset_200m().n_blocks, 18);
        assert_eq!(EncoderConfig::preset_2b().d_ff, 8192);
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::toy()
        };
        assert!(c.validate().is_err());
        let c = EncoderConfig {
            conv_kernel: 4,
            ..EncoderConfig::toy()
        };
        assert!(c.validate().is_err());
    }
}
