//! Frozen-encoder probes: features are computed once per context, then only
//! the head (and the layer weights for a weighted sum) is trained.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::contours::{reference_contours, Contours};
use super::metrics::{corpus_wer, dtw_corr, wer_score, DtwConfig};
use crate::audio_io::read_audio;
use crate::encoder::{BlockOutput, Encoder};
use crate::maskgen::ContextSpec;
use crate::nn::{log_softmax, softmax, Adam, AdamConfig, Init, Linear, ParamStore};
use crate::objectives::{ctc_greedy_decode, ctc_loss_tensor};
use crate::objectives::ctc::min_frames;
use crate::pipeline::config::ProbeConfig;
use crate::pipeline::data::{load_utterances, step_rng, Vocabulary};
use crate::frontend::EncoderInput;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    AsrCtc,
    Classification,
    SpeakingRate,
    PitchContour,
    IntensityContour,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Wer,
    Accuracy,
    DtwCorr,
    /// Mean absolute error (speaking rate, tokens per second).
    Mae,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Wer => "wer",
            Metric::Accuracy => "accuracy",
            Metric::DtwCorr => "dtw_corr",
            Metric::Mae => "mae",
        }
    }
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::AsrCtc,
        ProbeKind::Classification,
        ProbeKind::SpeakingRate,
        ProbeKind::PitchContour,
        ProbeKind::IntensityContour,
    ];

    pub fn metric(self) -> Metric {
        match self {
            ProbeKind::AsrCtc => Metric::Wer,
            ProbeKind::Classification => Metric::Accuracy,
            ProbeKind::SpeakingRate => Metric::Mae,
            ProbeKind::PitchContour | ProbeKind::IntensityContour => Metric::DtwCorr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::AsrCtc => "asr_ctc",
            ProbeKind::Classification => "classification",
            ProbeKind::SpeakingRate => "speaking_rate",
            ProbeKind::PitchContour => "pitch_contour",
            ProbeKind::IntensityContour => "intensity_contour",
        }
    }

    /// Semantic tasks drive tap selection; the rest are acoustic.
    pub fn is_semantic(self) -> bool {
        matches!(self, ProbeKind::AsrCtc | ProbeKind::Classification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Output of one block (0-based).
    Single(usize),
    /// Softmax-weighted sum over every block output.
    WeightedSum,
}

impl LayerSelection {
    pub fn label(self) -> String {
        match self {
            LayerSelection::Single(i) => i.to_string(),
            LayerSelection::WeightedSum => "all".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeExample {
    pub utt_id: String,
    pub input: EncoderInput,
    pub words: Vec<String>,
    pub class_label: Option<String>,
    pub contours: Contours,
}

#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub train: Vec<ProbeExample>,
    pub dev: Vec<ProbeExample>,
    pub test: Vec<ProbeExample>,
}

fn load_examples(manifest: &Path, cache: Option<&Path>) -> Result<Vec<ProbeExample>> {
    load_utterances(manifest, cache)?
        .into_iter()
        .map(|u| {
            let wave = read_audio(&u.audio_path)?;
            let mut contours = reference_contours(&wave, u.transcript.as_deref())?;
            contours.pitch.truncate(u.input.len());
            contours.intensity.truncate(u.input.len());
            if contours.pitch.len() != u.input.len() {
                return Err(Error::Shape(format!(
                    "{}: {} contour frames for {} encoder frames",
                    u.utt_id,
                    contours.pitch.len(),
                    u.input.len()
                )));
            }
            Ok(ProbeExample {
                words: u.words(),
                utt_id: u.utt_id,
                input: u.input,
                class_label: u.class_label,
                contours,
            })
        })
        .collect()
}

impl ProbeDataset {
    /// Holds out `dev_fraction` of the training manifest (seeded shuffle) as dev.
    pub fn load(train: &Path, test: Option<&Path>, cache: Option<&Path>, dev_fraction: f64, seed: u64) -> Result<Self> {
        let mut all = load_examples(train, cache)?;
        if all.len() < 2 {
            return Err(Error::InvalidInput("probe training needs at least two utterances".into()));
        }
        all.shuffle(&mut step_rng(seed, "probe-dev", 0));
        let n_dev = ((all.len() as f64 * dev_fraction).round() as usize).clamp(1, all.len() - 1);
        let train = all.split_off(n_dev);
        Ok(Self {
            train,
            dev: all,
            test: match test {
                Some(p) => load_examples(p, cache)?,
                None => Vec::new(),
            },
        })
    }
}

/// Every block output for every utterance of each split, under one context.
#[derive(Debug, Clone)]
pub struct ProbeFeatures {
    pub ctx: ContextSpec,
    pub n_blocks: usize,
    pub train: Vec<Vec<Tensor>>,
    pub dev: Vec<Vec<Tensor>>,
    pub test: Vec<Vec<Tensor>>,
}

fn block_tensors(out: BlockOutput) -> Result<Vec<Tensor>> {
    out.hidden[1..]
        .iter()
        .map(|h| {
            let (t, d) = h.dim();
            let v: Vec<f32> = h.iter().copied().collect();
            Ok(Tensor::from_vec(v, (t, d), &Device::Cpu)?)
        })
        .collect()
}

impl ProbeFeatures {
    pub fn compute(encoder: &Encoder, data: &ProbeDataset, ctx: &ContextSpec) -> Result<Self> {
        let run = |xs: &[ProbeExample]| -> Result<Vec<Vec<Tensor>>> {
            xs.iter().map(|x| block_tensors(encoder.forward(&x.input, ctx)?)).collect()
        };
        Ok(Self {
            ctx: *ctx,
            n_blocks: encoder.config().n_blocks,
            train: run(&data.train)?,
            dev: run(&data.dev)?,
            test: run(&data.test)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub task: ProbeKind,
    pub layer: LayerSelection,
    pub metric: Metric,
    pub dev: f64,
    pub test: Option<f64>,
    /// Final training loss (mean of the last 10 steps).
    pub final_loss: f64,
    /// Layer weights after training, for a weighted sum.
    pub layer_weights: Option<Vec<f64>>,
}

enum Head {
    Ctc { out: Linear, vocab: Vocabulary },
    Mlp { hidden: Linear, out: Linear, classes: Vec<String> },
    Regressor { out: Linear, mean: f64, std: f64 },
}

struct Probe<'a> {
    task: ProbeKind,
    sel: LayerSelection,
    head: Head,
    layer_logits: Option<Tensor>,
    dtw: DtwConfig,
    data: &'a ProbeDataset,
}

fn target_scalar(task: ProbeKind, x: &ProbeExample) -> Option<f64> {
    (task == ProbeKind::SpeakingRate).then_some(x.contours.speaking_rate).flatten()
}

fn target_contour(task: ProbeKind, x: &ProbeExample) -> &[f64] {
    match task {
        ProbeKind::PitchContour => &x.contours.pitch,
        _ => &x.contours.intensity,
    }
}

impl<'a> Probe<'a> {
    fn features(&self, taps: &[Tensor]) -> Result<Tensor> {
        match (self.sel, &self.layer_logits) {
            (LayerSelection::Single(i), _) => Ok(taps[i].clone()),
            (LayerSelection::WeightedSum, Some(w)) => {
                let w = softmax(w)?;
                let stacked = Tensor::stack(taps, 0)?;
                Ok(stacked.broadcast_mul(&w.reshape((taps.len(), 1, 1))?)?.sum(0)?)
            }
            (LayerSelection::WeightedSum, None) => unreachable!("weights registered for weighted sums"),
        }
    }

    fn loss(&self, x: &ProbeExample, taps: &[Tensor], scale: f64) -> Result<Option<(Tensor, f64)>> {
        let f = self.features(taps)?;
        match &self.head {
            Head::Ctc { out, vocab } => {
                let labels = vocab.encode(&x.words)?;
                if labels.is_empty() || min_frames(&labels) > f.dim(0)? {
                    return Ok(None);
                }
                let l = ctc_loss_tensor(&out.forward(&f)?, &labels, scale)?;
                Ok(Some((l.surrogate, l.value)))
            }
            Head::Mlp { hidden, out, classes } => {
                let Some(label) = &x.class_label else { return Ok(None) };
                let c = classes
                    .iter()
                    .position(|k| k == label)
                    .ok_or_else(|| Error::InvalidInput(format!("class {label:?} unseen in training")))?;
                let logits = out.forward(&hidden.forward(&f.mean_keepdim(0)?)?.relu()?)?;
                let nll = log_softmax(&logits)?.squeeze(0)?.get(c)?.neg()?;
                let v = nll.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                Ok(Some(((nll * scale)?, v)))
            }
            Head::Regressor { out, mean, std } => {
                let pred = out.forward(&f)?.squeeze(1)?;
                let (pred, target) = match target_scalar(self.task, x) {
                    Some(r) => (pred.mean_keepdim(0)?, vec![((r - mean) / std) as f32]),
                    None if self.task == ProbeKind::SpeakingRate => return Ok(None),
                    None => {
                        let t = target_contour(self.task, x);
                        (pred, t.iter().map(|v| ((v - mean) / std) as f32).collect())
                    }
                };
                let n = target.len();
                let target = Tensor::from_vec(target, n, &Device::Cpu)?;
                let mse = (pred - target)?.sqr()?.mean_all()?;
                let v = mse.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                Ok(Some(((mse * scale)?, v)))
            }
        }
    }

    fn evaluate(&self, xs: &[ProbeExample], feats: &[Vec<Tensor>]) -> Result<Option<f64>> {
        if xs.is_empty() {
            return Ok(None);
        }
        match &self.head {
            Head::Ctc { out, vocab } => {
                let mut scores = Vec::new();
                for (x, taps) in xs.iter().zip(feats) {
                    let logits = out.forward(&self.features(taps)?)?;
                    let flat = logits.flatten_all()?.to_vec1::<f32>()?;
                    let hyp = vocab.decode(&ctc_greedy_decode(&flat, vocab.len()));
                    scores.push(wer_score(&x.words, &hyp));
                }
                Ok(Some(corpus_wer(&scores)))
            }
            Head::Mlp { hidden, out, classes } => {
                let mut hits = 0usize;
                let mut n = 0usize;
                for (x, taps) in xs.iter().zip(feats) {
                    let Some(label) = &x.class_label else { continue };
                    let f = self.features(taps)?;
                    let logits = out.forward(&hidden.forward(&f.mean_keepdim(0)?)?.relu()?)?;
                    let k = logits.squeeze(0)?.argmax(D::Minus1)?.to_scalar::<u32>()? as usize;
                    hits += usize::from(classes.get(k) == Some(label));
                    n += 1;
                }
                Ok((n > 0).then(|| hits as f64 / n as f64))
            }
            Head::Regressor { out, mean, std } => {
                let mut total = 0.0;
                let mut n = 0usize;
                for (x, taps) in xs.iter().zip(feats) {
                    let pred: Vec<f64> = out
                        .forward(&self.features(taps)?)?
                        .squeeze(1)?
                        .to_dtype(DType::F64)?
                        .to_vec1()?;
                    if self.task == ProbeKind::SpeakingRate {
                        let Some(r) = target_scalar(self.task, x) else { continue };
                        let p = pred.iter().sum::<f64>() / pred.len() as f64 * std + mean;
                        total += (p - r).abs();
                    } else {
                        total += dtw_corr(&pred, target_contour(self.task, x), &self.dtw)?;
                    }
                    n += 1;
                }
                Ok((n > 0).then(|| total / n as f64))
            }
        }
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

/// Trains one probe head on frozen features and scores it on dev (and test
/// when present). Deterministic for a fixed `seed`.
pub fn train_probe(
    features: &ProbeFeatures,
    data: &ProbeDataset,
    task: ProbeKind,
    sel: LayerSelection,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    if let LayerSelection::Single(i) = sel {
        if i >= features.n_blocks {
            return Err(Error::InvalidInput(format!(
                "layer {i} out of range for {} blocks",
                features.n_blocks
            )));
        }
    }
    let d = features
        .train
        .first()
        .and_then(|t| t.first())
        .map(|t| t.dim(1))
        .transpose()?
        .ok_or_else(|| Error::InvalidInput("empty probe training split".into()))?;
    let mut ps = ParamStore::new(DType::F32, seed);
    let head = match task {
        ProbeKind::AsrCtc => {
            if data.train.iter().all(|x| x.words.is_empty()) {
                return Err(Error::InvalidInput("asr_ctc probe needs transcripts".into()));
            }
            let words: BTreeSet<String> = data.train.iter().chain(&data.dev).flat_map(|x| x.words.clone()).collect();
            let vocab = Vocabulary::from_words(words.into_iter().collect());
            Head::Ctc {
                out: Linear::new(&mut ps, "probe.ctc", d, vocab.len())?,
                vocab,
            }
        }
        ProbeKind::Classification => {
            let classes: BTreeSet<String> = data.train.iter().filter_map(|x| x.class_label.clone()).collect();
            if classes.len() < 2 {
                return Err(Error::InvalidInput("classification probe needs at least two class labels".into()));
            }
            let classes: Vec<String> = classes.into_iter().collect();
            Head::Mlp {
                hidden: Linear::new(&mut ps, "probe.mlp.hidden", d, cfg.mlp_hidden)?,
                out: Linear::new(&mut ps, "probe.mlp.out", cfg.mlp_hidden, classes.len())?,
                classes,
            }
        }
        ProbeKind::SpeakingRate => {
            if data.train.iter().all(|x| x.contours.speaking_rate.is_none()) {
                return Err(Error::InvalidInput("speaking_rate probe needs transcripts".into()));
            }
            let (mean, std) = mean_std(data.train.iter().filter_map(|x| x.contours.speaking_rate));
            Head::Regressor {
                out: Linear::new(&mut ps, "probe.regressor", d, 1)?,
                mean,
                std,
            }
        }
        ProbeKind::PitchContour | ProbeKind::IntensityContour => {
            let (mean, std) = mean_std(data.train.iter().flat_map(|x| target_contour(task, x).iter().copied()));
            Head::Regressor {
                out: Linear::new(&mut ps, "probe.regressor", d, 1)?,
                mean,
                std,
            }
        }
    };
    let layer_logits = match sel {
        LayerSelection::WeightedSum => Some(ps.get("probe.layer_logits", &[features.n_blocks], Init::Zeros)?),
        LayerSelection::Single(_) => None,
    };
    let probe = Probe {
        task,
        sel,
        head,
        layer_logits,
        dtw: DtwConfig {
            window: cfg.dtw_window,
            zero_variance_cost: cfg.dtw_zero_variance_cost,
        },
        data,
    };

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        warmup_steps: (cfg.steps / 10).max(1),
        ..AdamConfig::default()
    });
    let n = data.train.len();
    let b = cfg.batch_size.clamp(1, n);
    let lengths = vec![1usize; n];
    let mut recent = Vec::new();
    for step in 0..cfg.steps {
        let idx = crate::pipeline::data::batch_indices(&lengths, b, seed, step);
        let mut total: Option<Tensor> = None;
        let mut value = 0.0;
        let mut used = 0usize;
        for &i in &idx {
            if let Some((l, v)) = probe.loss(&probe.data.train[i], &features.train[i], 1.0 / idx.len() as f64)? {
                total = Some(match total {
                    Some(t) => (t + l)?,
                    None => l,
                });
                value += v;
                used += 1;
            }
        }
        let Some(total) = total else { continue };
        let grads = total.backward()?;
        adam.update(&ps, &grads, |_| true)?;
        recent.push(value / used as f64);
    }
    let tail = &recent[recent.len().saturating_sub(10)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let layer_weights = match &probe.layer_logits {
        Some(w) => Some(softmax(w)?.to_dtype(DType::F64)?.to_vec1::<f64>()?),
        None => None,
    };
    Ok(ProbeOutcome {
        task,
        layer: sel,
        metric: task.metric(),
        dev: probe
            .evaluate(&data.dev, &features.dev)?
            .ok_or_else(|| Error::InvalidInput(format!("no dev examples labelled for {}", task.name())))?,
        test: probe.evaluate(&data.test, &features.test)?,
        final_loss,
        layer_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn example(i: usize, class: usize) -> ProbeExample {
        ProbeExample {
            utt_id: format!("u{i}"),
            input: EncoderInput { frames: Array2::zeros((12, 4)) },
            words: vec![],
            class_label: Some(format!("c{class}")),
            contours: Contours {
                pitch: vec![0.0; 12],
                intensity: (0..12).map(|t| (t as f64 * 0.7 + class as f64).sin()).collect(),
                speaking_rate: None,
            },
        }
    }

    /// Two-block features: block 0 carries the class in a fixed direction,
    /// block 1 is noise.
    fn separable(n: usize, seed: u64) -> (ProbeDataset, ProbeFeatures) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut fs = Vec::new();
        for i in 0..n {
            let class = i % 3;
            xs.push(example(i, class));
            let mut b0 = vec![0f32; 12 * 8];
            let mut b1 = vec![0f32; 12 * 8];
            for t in 0..12 {
                for k in 0..8 {
                    b0[t * 8 + k] = if k == class { 3.0 } else { 0.0 } + rng.gen_range(-0.3..0.3);
                    b1[t * 8 + k] = rng.gen_range(-1.0..1.0);
                }
            }
            fs.push(vec![
                Tensor::from_vec(b0, (12, 8), &Device::Cpu).unwrap(),
                Tensor::from_vec(b1, (12, 8), &Device::Cpu).unwrap(),
            ]);
        }
        let dev_x = xs.split_off(n * 3 / 4);
        let dev_f = fs.split_off(n * 3 / 4);
        (
            ProbeDataset { train: xs, dev: dev_x, test: vec![] },
            ProbeFeatures {
                ctx: ContextSpec::FULL,
                n_blocks: 2,
                train: fs,
                dev: dev_f,
                test: vec![],
            },
        )
    }

    fn cfg(steps: usize) -> ProbeConfig {
        ProbeConfig {
            steps,
            lr: 1e-2,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn separable_classification_reaches_high_accuracy() {
        let (data, feats) = separable(48, 3);
        let out = train_probe(&feats, &data, ProbeKind::Classification, LayerSelection::Single(0), &cfg(80), 1).unwrap();
        assert!(out.dev >= 0.95, "{out:?}");
        assert!(out.test.is_none());
        let again = train_probe(&feats, &data, ProbeKind::Classification, LayerSelection::Single(0), &cfg(80), 1).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn weighted_sum_weights_stay_on_simplex() {
        let (data, feats) = separable(24, 4);
        for steps in [0, 5, 30] {
            let out = train_probe(&feats, &data, ProbeKind::Classification, LayerSelection::WeightedSum, &cfg(steps), 2).unwrap();
            let w = out.layer_weights.unwrap();
            assert_eq!(w.len(), 2);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn bad_layer_and_missing_labels() {
        let (mut data, feats) = separable(12, 5);
        assert!(train_probe(&feats, &data, ProbeKind::Classification, LayerSelection::Single(2), &cfg(1), 1).is_err());
        assert!(train_probe(&feats, &data, ProbeKind::AsrCtc, LayerSelection::Single(0), &cfg(1), 1).is_err());
        assert!(train_probe(&feats, &data, ProbeKind::SpeakingRate, LayerSelection::Single(0), &cfg(1), 1).is_err());
        for x in &mut data.train {
            x.class_label = None;
        }
        assert!(train_probe(&feats, &data, ProbeKind::Classification, LayerSelection::Single(0), &cfg(1), 1).is_err());
    }

    #[test]
    fn contour_probe_scores_with_dtw() {
        let (data, feats) = separable(16, 6);
        let out = train_probe(&feats, &data, ProbeKind::IntensityContour, LayerSelection::Single(1), &cfg(10), 1).unwrap();
        assert_eq!(out.metric, Metric::DtwCorr);
        assert!(out.dev >= 0.0 && out.dev.is_finite());
    }
}
