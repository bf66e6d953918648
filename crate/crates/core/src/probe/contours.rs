//! Reference pitch, intensity and speaking-rate targets at the 40 ms encoder rate.

use crate::audio_io::Waveform;
use crate::frontend::{num_fbank_frames, HOP_SAMPLES, STACK, WIN_SAMPLES};
use crate::{Error, Result};

/// Samples spanned by one encoder frame (four 25 ms windows at 10 ms hop).
pub const FRAME_SPAN: usize = (STACK - 1) * HOP_SAMPLES + WIN_SAMPLES;
pub const FRAME_HOP: usize = STACK * HOP_SAMPLES;
/// RMS floor; silence maps to `ln(RMS_FLOOR)`.
pub const RMS_FLOOR: f64 = 1e-5;
pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 400.0;
/// Normalized autocorrelation a frame needs to count as voiced.
pub const VOICING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Contours {
    pub pitch: Vec<f64>,
    pub intensity: Vec<f64>,
    pub speaking_rate: Option<f64>,
}

/// Encoder frames produced from `n_samples` samples.
pub fn num_frames(n_samples: usize) -> usize {
    num_fbank_frames(n_samples) / STACK
}

fn frame(samples: &[f32], t: usize) -> &[f32] {
    let start = t * FRAME_HOP;
    &samples[start..(start + FRAME_SPAN).min(samples.len())]
}

pub fn log_rms(x: &[f32]) -> f64 {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64;
    ms.sqrt().max(RMS_FLOOR).ln()
}

/// Autocorrelation F0 in Hz, or 0 for unvoiced/silent frames. Takes the first
/// local peak within 85% of the best one (guards against octave errors) and
/// refines it by parabolic interpolation.
pub fn estimate_f0(x: &[f32], sample_rate: u32) -> f64 {
    let sr = sample_rate as f64;
    let min_lag = (sr / F0_MAX).floor() as usize;
    let max_lag = ((sr / F0_MIN).ceil() as usize).min(x.len().saturating_sub(2));
    if max_lag <= min_lag + 1 || log_rms(x) <= RMS_FLOOR.ln() + 1e-9 {
        return 0.0;
    }
    let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let r = |lag: usize| -> f64 {
        let (a, b) = (&x[..x.len() - lag], &x[lag..]);
        let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let den = (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let lo = min_lag.saturating_sub(1).max(1);
    let ac: Vec<f64> = (lo..=max_lag + 1).map(r).collect();
    let at = |lag: usize| ac[lag - lo];
    let peaks: Vec<usize> = (min_lag.max(lo + 1)..=max_lag)
        .filter(|&l| at(l) >= at(l - 1) && at(l) > at(l + 1))
        .collect();
    let Some(best) = peaks.iter().map(|&l| at(l)).reduce(f64::max) else {
        return 0.0;
    };
    if best < VOICING_THRESHOLD {
        return 0.0;
    }
    let lag = peaks.into_iter().find(|&l| at(l) >= 0.85 * best).expect("best is a peak");
    let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    sr / (lag as f64 + shift.clamp(-0.5, 0.5))
}

/// Pitch and intensity per 40 ms frame, plus transcript tokens per second.
pub fn reference_contours(wave: &Waveform, transcript: Option<&str>) -> Result<Contours> {
    if wave.sample_rate != 16_000 {
        return Err(Error::InvalidInput(format!("expected 16 kHz audio, got {} Hz", wave.sample_rate)));
    }
    let n = num_frames(wave.samples.len());
    let pitch = (0..n).map(|t| estimate_f0(frame(&wave.samples, t), wave.sample_rate)).collect();
    let intensity = (0..n).map(|t| log_rms(frame(&wave.samples, t))).collect();
    let duration = wave.samples.len() as f64 / wave.sample_rate as f64;
    let speaking_rate = transcript.map(|t| t.split_whitespace().count() as f64 / duration);
    Ok(Contours {
        pitch,
        intensity,
        speaking_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::prepare_input;

    fn tone(hz: f64, amp: f32, secs: f64) -> Waveform {
        let n = (secs * 16_000.0) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin() as f32)
            .collect();
        Waveform::new(s, 16_000)
    }

    #[test]
    fn frame_count_matches_encoder_input() {
        for secs in [1.0, 1.37, 2.5] {
            let w = tone(200.0, 0.3, secs);
            assert_eq!(num_frames(w.samples.len()), prepare_input(&w).unwrap().len());
        }
    }

    #[test]
    fn pure_tone_pitch() {
        for hz in [110.0, 200.0, 333.0] {
            let c = reference_contours(&tone(hz, 0.3, 1.0), None).unwrap();
            for p in &c.pitch {
                assert!((p - hz).abs() <= 5.0, "{hz}: {p}");
            }
        }
    }

    #[test]
    fn silence_is_floor_and_unvoiced() {
        let c = reference_contours(&Waveform::new(vec![0.0; 16_000], 16_000), Some("a b")).unwrap();
        assert!(c.intensity.iter().all(|&v| v == RMS_FLOOR.ln()));
        assert!(c.pitch.iter().all(|&p| p == 0.0));
        assert_eq!(c.speaking_rate, Some(2.0));
    }

    #[test]
    fn doubling_amplitude_shifts_intensity_by_ln2() {
        let a = reference_contours(&tone(200.0, 0.2, 1.0), None).unwrap();
        let b = reference_contours(&tone(200.0, 0.4, 1.0), None).unwrap();
        for (x, y) in a.intensity.iter().zip(&b.intensity) {
            assert!((y - x - 2f64.ln()).abs() < 1e-9);
        }
        for (x, y) in a.pitch.iter().zip(&b.pitch) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
