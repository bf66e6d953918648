//! Deterministic tone-sequence fixtures.
//!
//! Each vocabulary word is a harmonic tone with a fixed fundamental, so a small
//! transducer learns the mapping within minutes. Every utterance also carries a
//! class label: a narrow-band hum, gated by the word envelope, at one of three
//! fixed frequencies.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{write_manifest, ManifestEntry};
use super::wav::{write_wav, Waveform, SAMPLE_RATE};
use crate::{Error, Result};

pub const VOCAB: [&str; 12] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "yes", "no",
];

pub const CLASSES: [&str; 3] = ["hum_low", "hum_mid", "hum_high"];
const CLASS_HZ: [f64; 3] = [1500.0, 2500.0, 3500.0];

/// Fundamental frequency of a vocabulary word.
pub fn token_f0(index: usize) -> f64 {
    110.0 + 22.0 * index as f64
}

pub const MIN_DURATION_S: f64 = 1.0;
pub const MAX_DURATION_S: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub root: PathBuf,
    /// All utterances.
    pub manifest: PathBuf,
    /// Every fifth utterance goes to test, the rest to train.
    pub train: PathBuf,
    pub test: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Stable per-utterance seed so utterance `i` does not depend on `n_utts`.
fn utt_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}

/// Renders one utterance: returns the waveform, its transcript and class label.
pub fn synth_utterance(seed: u64, index: usize) -> (Waveform, String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed(seed, index));
    let sr = SAMPLE_RATE as f64;
    let n_words = rng.gen_range(2..=6);
    let class = rng.gen_range(0..CLASSES.len());
    let lead: f64 = rng.gen_range(0.10..0.30);
    let mut segments = Vec::with_capacity(n_words);
    let mut t = lead;
    for w in 0..n_words {
        if w > 0 {
            t += rng.gen_range(0.06..0.16);
        }
        let token = rng.gen_range(0..VOCAB.len());
        let dur = rng.gen_range(0.24..0.40);
        let gain = rng.gen_range(0.30..0.80);
        segments.push((token, t, dur, gain));
        t += dur;
    }
    let tail = rng.gen_range(0.10..0.30);
    let total = (t + tail).clamp(MIN_DURATION_S, MAX_DURATION_S);
    let n = (total * sr).round() as usize;

    let noise = Normal::new(0.0, 0.002).expect("valid sigma");
    let mut samples: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let ramp = 0.010;
    for &(token, start, dur, gain) in &segments {
        let f0 = token_f0(token);
        let s0 = (start * sr).round() as usize;
        let len = (dur * sr).round() as usize;
        for k in 0..len.min(n.saturating_sub(s0)) {
            let tt = k as f64 / sr;
            let env = (tt / ramp).min((dur - tt) / ramp).clamp(0.0, 1.0);
            let env = 0.5 - 0.5 * (PI * env).cos();
            let tone = (2.0 * PI * f0 * tt).sin()
                + 0.5 * (2.0 * PI * 2.0 * f0 * tt).sin()
                + 0.25 * (2.0 * PI * 3.0 * f0 * tt).sin();
            let hum = 0.35 * (2.0 * PI * CLASS_HZ[class] * tt).sin();
            samples[s0 + k] += gain * env * (tone / 1.75 + hum) / 1.35;
        }
    }
    let transcript = segments
        .iter()
        .map(|&(tok, ..)| VOCAB[tok])
        .collect::<Vec<_>>()
        .join(" ");
    let wave = Waveform::new(
        samples.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
        SAMPLE_RATE,
    );
    (wave, transcript, CLASSES[class].to_string())
}

/// Writes `n_utts` WAV files plus `manifest.jsonl`, `train.jsonl` and
/// `test.jsonl` under `out_dir`. Output bytes depend only on `(n_utts, seed)`.
pub fn synth_dataset(out_dir: &Path, n_utts: usize, seed: u64) -> Result<SynthDataset> {
    if n_utts == 0 {
        return Err(Error::InvalidInput("n_utts must be >= 1".into()));
    }
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut entries = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let (wave, transcript, class) = synth_utterance(seed, i);
        let utt_id = format!("synth{seed}-{i:05}");
        let rel = PathBuf::from("audio").join(format!("{utt_id}.wav"));
        write_wav(&out_dir.join(&rel), &wave)?;
        entries.push(ManifestEntry {
            utt_id,
            audio_path: rel,
            duration_s: wave.samples.len() as f64 / SAMPLE_RATE as f64,
            transcript: Some(transcript),
            class_label: Some(class),
        });
    }
    let (test, train): (Vec<_>, Vec<_>) = entries
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| i % 5 == 4);
    let strip = |v: Vec<(usize, ManifestEntry)>| v.into_iter().map(|(_, e)| e).collect::<Vec<_>>();
    let ds = SynthDataset {
        root: out_dir.to_path_buf(),
        manifest: out_dir.join("manifest.jsonl"),
        train: out_dir.join("train.jsonl"),
        test: out_dir.join("test.jsonl"),
        entries: entries.clone(),
    };
    write_manifest(&ds.manifest, &entries)?;
    write_manifest(&ds.train, &strip(train))?;
    write_manifest(&ds.test, &strip(test))?;
    Ok(ds)
}
