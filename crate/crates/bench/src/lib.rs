//! Deterministic fixtures shared by the criterion benches in `benches/`.

use candle_core::DType;
use dualmode_core::encoder::{Encoder, EncoderConfig};
use dualmode_core::frontend::EncoderInput;
use dualmode_core::nn::ParamStore;
use dualmode_core::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform noise in `[-1, 1)`.
pub fn noise(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0f32..1.0))
}

pub fn logits(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

/// A randomly initialized toy encoder and an input of `frames` encoder frames.
pub fn toy_encoder(frames: usize, seed: u64) -> Result<(ParamStore, Encoder, EncoderInput)> {
    let cfg = EncoderConfig::toy();
    let mut ps = ParamStore::new(DType::F32, seed);
    let enc = Encoder::new(&mut ps, "encoder", &cfg)?;
    let input = EncoderInput {
        frames: noise(frames, cfg.frontend_dim, seed + 1),
    };
    Ok((ps, enc, input))
}
