//! Utterance loading, vocabulary and deterministic batching.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio_io::{load_manifest, read_audio, ManifestEntry};
use crate::frontend::{prepare_input, read_cached, write_cached, EncoderInput};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub audio_path: PathBuf,
    pub duration_s: f64,
    pub transcript: Option<String>,
    pub class_label: Option<String>,
    pub input: EncoderInput,
}

impl Utterance {
    pub fn words(&self) -> Vec<String> {
        self.transcript
            .as_deref()
            .map(|t| t.split_whitespace().map(str::to_string).collect())
            .unwrap_or_default()
    }
}

/// Encoder inputs for every manifest entry, read from `cache` when present
/// and written there on a miss.
pub fn load_utterances(manifest: &Path, cache: Option<&Path>) -> Result<Vec<Utterance>> {
    load_manifest(manifest)?
        .into_iter()
        .map(|e| load_one(e, cache))
        .collect()
}

fn load_one(e: ManifestEntry, cache: Option<&Path>) -> Result<Utterance> {
    let cached = cache.filter(|d| d.join(format!("{}.json", e.utt_id)).exists());
    let input = match cached {
        Some(dir) => read_cached(dir, &e.utt_id)?,
        None => {
            let input = prepare_input(&read_audio(&e.audio_path)?)?;
            if let Some(dir) = cache {
                write_cached(dir, &e.utt_id, &input)?;
            }
            input
        }
    };
    Ok(Utterance {
        utt_id: e.utt_id,
        audio_path: e.audio_path,
        duration_s: e.duration_s,
        transcript: e.transcript,
        class_label: e.class_label,
        input,
    })
}

/// Word vocabulary; id 0 is the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

pub const BLANK_TOKEN: &str = "<blank>";

impl Vocabulary {
    pub fn from_utterances(utts: &[Utterance]) -> Self {
        let words: BTreeSet<String> = utts.iter().flat_map(|u| u.words()).collect();
        Self::from_words(words.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let mut tokens = vec![BLANK_TOKEN.to_string()];
        tokens.extend(words);
        Self { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err(Error::InvalidInput("vocabulary must start with the blank token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<u32>> {
        words
            .iter()
            .map(|w| {
                self.tokens[1..]
                    .iter()
                    .position(|t| t == w)
                    .map(|i| i as u32 + 1)
                    .ok_or_else(|| Error::InvalidInput(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter_map(|&i| self.tokens.get(i as usize).filter(|_| i != 0).cloned())
            .collect()
    }
}

/// Deterministic RNG for `(seed, tag, step)`, so any step can be replayed.
pub fn step_rng(seed: u64, tag: &str, step: usize) -> ChaCha8Rng {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(tag.as_bytes())
        .chain_update((step as u64).to_le_bytes())
        .finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Indices of the batch used at `step`. Each epoch shuffles, stable-sorts
/// windows of 4 batches by length to limit padding, then shuffles the batch
/// order. Equal lengths keep their shuffled order, so batch composition
/// still varies between epochs.
pub fn batch_indices(lengths: &[usize], batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let n = lengths.len();
    if n == 0 {
        return Vec::new();
    }
    let b = batch_size.min(n);
    let per_epoch = n.div_ceil(b);
    let epoch = step / per_epoch;
    let mut rng = step_rng(seed, "epoch", epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for window in order.chunks_mut(b * 4) {
        window.sort_by_key(|&i| lengths[i]);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(b).map(|c| c.to_vec()).collect();
    batches.shuffle(&mut rng);
    batches.swap_remove(step % per_epoch)
}

/// Zero-padded `[B, T_max, F]` batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub lens: Vec<usize>,
}

pub fn make_batch(inputs: &[&EncoderInput]) -> Result<Batch> {
    let t_max = inputs.iter().map(|i| i.len()).max().unwrap_or(0);
    let dim = inputs.first().map_or(0, |i| i.dim());
    if t_max == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut data = vec![0f32; inputs.len() * t_max * dim];
    for (b, inp) in inputs.iter().enumerate() {
        if inp.dim() != dim {
            return Err(Error::Shape("inputs in a batch differ in width".into()));
        }
        let base = b * t_max * dim;
        for (i, v) in inp.frames.iter().enumerate() {
            data[base + i] = *v;
        }
    }
    Ok(Batch {
        x: Tensor::from_vec(data, (inputs.len(), t_max, dim), &Device::Cpu)?,
        lens: inputs.iter().map(|i| i.len()).collect(),
    })
}
