//! SpecAugment-style frequency and time masking on stacked encoder inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::EncoderInput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugConfig {
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub time_masks: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            max_freq_width: 64,
            time_masks: 2,
            max_time_width: 10,
        }
    }
}

impl SpecAugConfig {
    pub fn disabled() -> Self {
        Self {
            freq_masks: 0,
            max_freq_width: 0,
            time_masks: 0,
            max_time_width: 0,
        }
    }
}

/// Zero-fills up to `freq_masks` dimension bands and `time_masks` frame bands.
pub fn specaug<R: Rng>(input: &EncoderInput, cfg: &SpecAugConfig, rng: &mut R) -> EncoderInput {
    let mut frames = input.frames.clone();
    let (t_len, d) = frames.dim();
    for _ in 0..cfg.freq_masks {
        let w = rng.gen_range(0..=cfg.max_freq_width).min(d);
        let f0 = rng.gen_range(0..=d - w);
        frames.slice_mut(ndarray::s![.., f0..f0 + w]).fill(0.0);
    }
    for _ in 0..cfg.time_masks {
        let w = rng.gen_range(0..=cfg.max_time_width).min(t_len);
        let t0 = rng.gen_range(0..=t_len - w);
        frames.slice_mut(ndarray::s![t0..t0 + w, ..]).fill(0.0);
    }
    EncoderInput { frames }
}
