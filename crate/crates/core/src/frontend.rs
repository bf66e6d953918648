//! Log mel filterbank features and 4x frame stacking to a 40 ms rate.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::{Waveform, SAMPLE_RATE};
use crate::tensor_file::{self, DType, TensorMeta};
use crate::{Error, Result};

pub const WIN_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const HOP_S: f64 = 0.010;
pub const WIN_S: f64 = 0.025;
pub const STACK: usize = 4;
pub const ENCODER_FRAME_S: f64 = 0.040;
pub const DEFAULT_MELS: usize = 128;
pub const LOG_FLOOR: f32 = 1e-10;
const N_FFT: usize = 1024;
const MEL_LO_HZ: f64 = 20.0;
const MEL_HI_HZ: f64 = 7600.0;

/// Log filterbank energies at a 10 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankFeatures {
    pub frames: Array2<f32>,
}

/// Stacked features at the encoder's 40 ms rate.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub frames: Array2<f32>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Rows `start..end`, for chunked streaming.
    pub fn slice(&self, start: usize, end: usize) -> EncoderInput {
        EncoderInput {
            frames: self.frames.slice(s![start..end, ..]).to_owned(),
        }
    }
}

/// Number of 10 ms frames for `n_samples`, or 0 when shorter than a window.
pub fn num_fbank_frames(n_samples: usize) -> usize {
    if n_samples < WIN_SAMPLES {
        0
    } else {
        1 + (n_samples - WIN_SAMPLES) / HOP_SAMPLES
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided spectrum, `[n_mels x (N_FFT/2+1)]`.
pub fn mel_filterbank(n_mels: usize) -> Array2<f32> {
    let n_bins = N_FFT / 2 + 1;
    let lo = hz_to_mel(MEL_LO_HZ);
    let hi = hz_to_mel(MEL_HI_HZ);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, b)| {
        let f = b as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let w = if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        };
        w as f32
    })
}

struct Analyzer {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filters: Array2<f32>,
}

impl Analyzer {
    fn new(n_mels: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..WIN_SAMPLES)
            .map(|i| {
                let x = 2.0 * std::f64::consts::PI * i as f64 / WIN_SAMPLES as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect();
        Self {
            fft,
            window,
            filters: mel_filterbank(n_mels),
        }
    }
}

/// Log mel filterbank energies (25 ms Hann window, 10 ms hop).
pub fn fbank(wave: &Waveform, n_mels: usize) -> Result<FbankFeatures> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidInput(format!(
            "fbank expects {SAMPLE_RATE} Hz audio, got {}",
            wave.sample_rate
        )));
    }
    let t10 = num_fbank_frames(wave.samples.len());
    if t10 == 0 {
        return Err(Error::InvalidInput(format!(
            "audio has {} samples, shorter than one {WIN_SAMPLES}-sample window",
            wave.samples.len()
        )));
    }
    let an = Analyzer::new(n_mels);
    let n_bins = N_FFT / 2 + 1;
    let mut frames = Array2::<f32>::zeros((t10, n_mels));
    let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
    let mut power = vec![0f32; n_bins];
    for t in 0..t10 {
        let start = t * HOP_SAMPLES;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < WIN_SAMPLES {
                Complex::new(wave.samples[start + i] * an.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        an.fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..n_mels {
            let e: f32 = an
                .filters
                .row(m)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            frames[[t, m]] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(FbankFeatures { frames })
}

/// Per-utterance mean/variance normalization of each filterbank channel.
/// Constant channels map to zero.
pub fn normalize(feats: &FbankFeatures) -> FbankFeatures {
    let x = &feats.frames;
    let n = x.nrows() as f32;
    let mean = x.mean_axis(Axis(0)).expect("at least one frame");
    let var = x.map_axis(Axis(0), |col| {
        let m = col.mean().unwrap_or(0.0);
        col.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / n
    });
    let mut out = x.clone();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let sd = var[j].sqrt();
        let scale = if sd > 1e-4 { 1.0 / sd } else { 0.0 };
        col.mapv_inplace(|v| (v - mean[j]) * scale);
    }
    FbankFeatures { frames: out }
}

/// Row `j` is `[f(4j) | f(4j+1) | f(4j+2) | f(4j+3)]`, oldest first; trailing
/// frames that do not fill a block are dropped.
pub fn stack_downsample(feats: &FbankFeatures) -> Result<EncoderInput> {
    let (t10, n_mels) = feats.frames.dim();
    if t10 < STACK {
        return Err(Error::InvalidInput(format!(
            "need at least {STACK} fbank frames to stack, got {t10}"
        )));
    }
    let t40 = t10 / STACK;
    let mut out = Array2::<f32>::zeros((t40, STACK * n_mels));
    for j in 0..t40 {
        for k in 0..STACK {
            out.slice_mut(s![j, k * n_mels..(k + 1) * n_mels])
                .assign(&feats.frames.row(STACK * j + k));
        }
    }
    Ok(EncoderInput { frames: out })
}

/// Waveform to encoder input: fbank, per-utterance normalization, stacking.
pub fn prepare_input(wave: &Waveform) -> Result<EncoderInput> {
    stack_downsample(&normalize(&fbank(wave, DEFAULT_MELS)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub frame_rate: f64,
}

pub fn write_cached(dir: &Path, utt_id: &str, input: &EncoderInput) -> Result<()> {
    let meta = tensor_file::write_matrix(&dir.join(format!("{utt_id}.bin")), &input.frames)?;
    tensor_file::write_json(
        &dir.join(format!("{utt_id}.json")),
        &FeatureSidecar {
            shape: meta.shape,
            dtype: meta.dtype,
            frame_rate: ENCODER_FRAME_S,
        },
    )
}

pub fn read_cached(dir: &Path, utt_id: &str) -> Result<EncoderInput> {
    let side: FeatureSidecar = tensor_file::read_json(&dir.join(format!("{utt_id}.json")))?;
    let meta = TensorMeta {
        shape: side.shape,
        dtype: side.dtype,
    };
    Ok(EncoderInput {
        frames: tensor_file::read_matrix(&dir.join(format!("{utt_id}.bin")), &meta)?,
    })
}
