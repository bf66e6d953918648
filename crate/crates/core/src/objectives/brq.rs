//! Random-projection quantizer targets and span masking for masked prediction.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::frontend::EncoderInput;
use crate::{Error, Result};

/// Frozen projection `[input_dim, d_q]` and unit-norm codebook `[K, d_q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomQuantizer {
    pub projection: Array2<f32>,
    pub codebook: Array2<f32>,
    pub seed: u64,
}

impl RandomQuantizer {
    pub fn new(input_dim: usize, d_q: usize, k: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || d_q == 0 || k == 0 {
            return Err(Error::InvalidInput("quantizer dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Xavier-normal projection, standard-normal codebook.
        let std = (2.0 / (input_dim + d_q) as f64).sqrt();
        let proj = Normal::new(0.0, std).expect("positive std");
        let projection = Array2::from_shape_fn((input_dim, d_q), |_| proj.sample(&mut rng) as f32);
        let mut codebook = Array2::from_shape_fn((k, d_q), |_| {
            Normal::new(0.0, 1.0).expect("unit").sample(&mut rng) as f32
        });
        for mut row in codebook.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        Ok(Self {
            projection,
            codebook,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn num_codes(&self) -> usize {
        self.codebook.nrows()
    }
}

/// Nearest codebook row to each normalized projected frame (ties: lowest index).
pub fn brq_codes(input: &EncoderInput, q: &RandomQuantizer) -> Result<Vec<u32>> {
    if input.dim() != q.input_dim() {
        return Err(Error::Shape(format!(
            "quantizer expects {}-dim frames, got {}",
            q.input_dim(),
            input.dim()
        )));
    }
    let proj = input.frames.dot(&q.projection);
    let mut codes = Vec::with_capacity(input.len());
    for row in proj.axis_iter(Axis(0)) {
        let n = row.dot(&row).sqrt();
        let row = if n > 0.0 { row.mapv(|v| v / n) } else { row.to_owned() };
        // For unit vectors, min distance == max dot product.
        let sims = q.codebook.dot(&row);
        let mut best = 0usize;
        for (k, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = k;
            }
        }
        codes.push(best as u32);
    }
    Ok(codes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanMask {
    pub masked: Vec<bool>,
    pub span_frames: usize,
    pub p_start: f64,
}

impl SpanMask {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Each frame starts a span with probability `p_start`; spans overlap and clip at `len`.
pub fn sample_span_mask<R: Rng>(len: usize, span_frames: usize, p_start: f64, rng: &mut R) -> Result<SpanMask> {
    if !(0.0..=1.0).contains(&p_start) {
        return Err(Error::InvalidInput(format!("p_start {p_start} outside [0, 1]")));
    }
    let mut masked = vec![false; len];
    for t in 0..len {
        if rng.gen_bool(p_start) {
            for m in masked.iter_mut().skip(t).take(span_frames) {
                *m = true;
            }
        }
    }
    Ok(SpanMask {
        masked,
        span_frames,
        p_start,
    })
}

pub const SPAN_NOISE_STD: f64 = 0.1;

/// Replaces masked frames with N(0, 0.1) noise.
pub fn apply_span_mask<R: Rng>(input: &EncoderInput, m: &SpanMask, rng: &mut R) -> Result<EncoderInput> {
    if m.masked.len() != input.len() {
        return Err(Error::Shape(format!(
            "mask covers {} frames, input has {}",
            m.masked.len(),
            input.len()
        )));
    }
    let noise = Normal::new(0.0, SPAN_NOISE_STD).expect("positive std");
    let mut frames = input.frames.clone();
    for (mut row, &masked) in frames.axis_iter_mut(Axis(0)).zip(&m.masked) {
        if masked {
            row.mapv_inplace(|_| noise.sample(rng) as f32);
        }
    }
    Ok(EncoderInput { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn random_input(t: usize, d: usize, seed: u64) -> EncoderInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderInput {
            frames: Array2::from_shape_fn((t, d), |_| rng.gen_range(-2.0..2.0)),
        }
    }

    /// Solves `a x = b` for a small dense system (Gauss-Jordan, partial pivoting).
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..n {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
        (0..n).map(|i| b[i] / a[i][i]).collect()
    }

    #[test]
    fn scaled_preimage_of_a_codebook_row_maps_to_it() {
        let q = RandomQuantizer::new(512, 16, 1024, 9).unwrap();
        let p = q.projection.mapv(|v| v as f64);
        let ptp = p.t().dot(&p);
        for k in [0usize, 17, 1023] {
            let c: Vec<f64> = q.codebook.row(k).iter().map(|&v| v as f64).collect();
            let a: Vec<Vec<f64>> = ptp.rows().into_iter().map(|r| r.to_vec()).collect();
            let z = ndarray::Array1::from(solve(a, c));
            let x = p.dot(&z).mapv(|v| (v * 3.7) as f32);
            let input = EncoderInput {
                frames: x.insert_axis(Axis(0)),
            };
            assert_eq!(brq_codes(&input, &q).unwrap(), vec![k as u32]);
        }
    }

    #[test]
    fn matches_brute_force_nearest_neighbour() {
        let q = RandomQuantizer::new(512, 16, 1024, 1).unwrap();
        let input = random_input(100, 512, 2);
        let codes = brq_codes(&input, &q).unwrap();
        for (t, &code) in codes.iter().enumerate() {
            let mut y = vec![0f64; 16];
            for (j, yj) in y.iter_mut().enumerate() {
                for i in 0..512 {
                    *yj += input.frames[[t, i]] as f64 * q.projection[[i, j]] as f64;
                }
            }
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dist = |k: usize| -> f64 {
                (0..16).map(|j| (y[j] / n - q.codebook[[k, j]] as f64).powi(2)).sum()
            };
            let best = (0..1024).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            assert_eq!(code as usize, best, "frame {t}");
        }
    }

    #[test]
    fn quantizer_is_deterministic_per_seed() {
        assert_eq!(RandomQuantizer::new(8, 4, 16, 3).unwrap(), RandomQuantizer::new(8, 4, 16, 3).unwrap());
        assert_ne!(RandomQuantizer::new(8, 4, 16, 3).unwrap(), RandomQuantizer::new(8, 4, 16, 4).unwrap());
        assert!(RandomQuantizer::new(8, 4, 16, 3).unwrap().codebook.rows().into_iter().all(|r| (r.dot(&r) - 1.0).abs() < 1e-5));
    }

    #[test]
    fn rejects_wrong_dim() {
        let q = RandomQuantizer::new(8, 4, 16, 3).unwrap();
        assert!(brq_codes(&random_input(3, 7, 0), &q).is_err());
    }

    #[test]
    fn span_mask_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = random_input(20, 8, 1);
        let none = sample_span_mask(20, 8, 0.0, &mut rng).unwrap();
        assert_eq!(none.count(), 0);
        assert_eq!(apply_span_mask(&input, &none, &mut rng).unwrap(), input);
        let all = sample_span_mask(20, 20, 1.0, &mut rng).unwrap();
        assert_eq!(all.count(), 20);
        let out = apply_span_mask(&input, &all, &mut rng).unwrap();
        for t in 0..20 {
            assert_ne!(out.frames.row(t), input.frames.row(t));
        }
        assert!(sample_span_mask(5, 2, 1.5, &mut rng).is_err());
        assert!(apply_span_mask(&random_input(4, 8, 0), &all, &mut rng).is_err());
    }

    #[test]
    fn noise_has_the_configured_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_input(200, 64, 1);
        let all = sample_span_mask(200, 200, 1.0, &mut rng).unwrap();
        let out = apply_span_mask(&input, &all, &mut rng).unwrap();
        let n = out.frames.len() as f64;
        let var = out.frames.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - SPAN_NOISE_STD).abs() < 0.005);
    }

    #[test]
    fn coverage_matches_overlap_formula() {
        let expect = 1.0 - (1.0f64 - 0.02).powi(8);
        let mut total = 0.0;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += sample_span_mask(1000, 8, 0.02, &mut rng).unwrap().count() as f64 / 1000.0;
        }
        assert!((total / 1000.0 - expect).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn masked_frames_belong_to_a_span(len in 1usize..60, span in 1usize..10, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_span_mask(len, span, 0.2, &mut rng).unwrap();
            // Runs of masked frames are never longer than... at least `span` unless clipped at the end.
            let mut t = 0;
            while t < len {
                if m.masked[t] {
                    let start = t;
                    while t < len && m.masked[t] { t += 1; }
                    prop_assert!(t - start >= span || t == len);
                } else {
                    t += 1;
                }
            }
        }

        #[test]
        fn codes_are_scale_invariant_and_equivariant(seed in 0u64..50, scale in 0.1f32..10.0) {
            let q = RandomQuantizer::new(16, 4, 32, seed).unwrap();
            let input = random_input(10, 16, seed + 1);
            let codes = brq_codes(&input, &q).unwrap();
            let scaled = EncoderInput { frames: input.frames.mapv(|v| v * scale) };
            prop_assert_eq!(&brq_codes(&scaled, &q).unwrap(), &codes);
            let mut rev = input.frames.clone();
            rev.invert_axis(Axis(0));
            let mut rc = brq_codes(&EncoderInput { frames: rev }, &q).unwrap();
            rc.reverse();
            prop_assert_eq!(rc, codes);
        }
    }
}
