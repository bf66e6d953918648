//! Stage runner: BestRQ pretraining, transducer fine-tuning and pseudo-label
//! distillation, each under a fixed or per-batch sampled attention context.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng;

use super::checkpoint::{
    allowed_parents, checkpoint_id, save_checkpoint, validate_lineage, Checkpoint, CheckpointMeta,
    LineageEntry, LossRecord, RngState, ENCODER_PREFIX,
};
use super::config::{Phase, PipelineConfig, StageKind, StudentInit};
use super::data::{batch_indices, load_utterances, make_batch, step_rng, Utterance, Vocabulary};
use super::transducer::Transducer;
use crate::encoder::Encoder;
use crate::maskgen::{mask_for_context, sample_context, ContextSpec, SamplingSpace};
use crate::nn::{scalar_f64, Adam, Linear, ParamStore};
use crate::objectives::ce::valid_rows;
use crate::objectives::{apply_span_mask, brq_codes, brq_loss, distill_loss, sample_span_mask, specaug, RandomQuantizer};
use crate::quantizer::PseudoLabelStore;
use crate::{Error, Result};

pub const TRANSDUCER_PREFIX: &str = "transducer";
const QUANTIZER_SEED_SALT: u64 = 0x51A7_E0F1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    MaskedPrediction,
    Transducer,
    Distillation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextPolicy {
    Fixed(ContextSpec),
    Sampled(SamplingSpace),
}

impl ContextPolicy {
    fn context<R: Rng>(&self, rng: &mut R) -> Result<ContextSpec> {
        match self {
            ContextPolicy::Fixed(c) => Ok(*c),
            ContextPolicy::Sampled(space) => sample_context(space, rng),
        }
    }
}

/// Streaming single-mode context: 5.4 s look-back, no look-ahead.
pub fn streaming_context() -> ContextSpec {
    ContextSpec::seconds(5.4, 0.0)
}

pub fn stage_plan(cfg: &PipelineConfig) -> (Objective, ContextPolicy) {
    use StageKind::*;
    let sampled = ContextPolicy::Sampled(cfg.sampling_space());
    let full = ContextPolicy::Fixed(ContextSpec::FULL);
    let streaming = ContextPolicy::Fixed(streaming_context());
    match (cfg.stage.kind, cfg.stage.phase) {
        (S1, _) => (Objective::MaskedPrediction, full),
        (BrqDm, _) => (Objective::MaskedPrediction, sampled),
        (S2, _) => (Objective::Transducer, full),
        (S3 | DistillFromE1, _) => (Objective::Distillation, sampled),
        (S4, _) => (Objective::Transducer, sampled),
        (BaselineStreaming, Phase::Pretrain) => (Objective::MaskedPrediction, streaming),
        (BaselineStreaming, Phase::Finetune) => (Objective::Transducer, streaming),
        (BaselineFullContext, Phase::Pretrain) => (Objective::MaskedPrediction, full),
        (BaselineFullContext, Phase::Finetune) => (Objective::Transducer, full),
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageInputs {
    /// Checkpoint whose encoder initializes this stage.
    pub init: Option<PathBuf>,
    /// Teacher checkpoint for distillation stages.
    pub teacher: Option<PathBuf>,
    /// Pseudo-label store produced from the teacher.
    pub labels: Option<PathBuf>,
    /// Resume from this (possibly partial) checkpoint of the same run.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this step is reached, as if interrupted.
    pub stop_at: Option<usize>,
}

enum Head {
    MaskedPrediction {
        head: Linear,
        codes: Vec<Vec<u32>>,
    },
    Distillation {
        head: Linear,
        labels: Vec<Vec<u32>>,
    },
    Transducer {
        model: Transducer,
        labels: Vec<Vec<u32>>,
    },
}

/// Everything a loaded checkpoint provides for inference.
pub struct LoadedModel {
    pub ps: ParamStore,
    pub encoder: Encoder,
    pub transducer: Option<Transducer>,
    pub vocab: Option<Vocabulary>,
    pub checkpoint: Checkpoint,
}

impl LoadedModel {
    pub fn open(dir: &Path) -> Result<Self> {
        let checkpoint = Checkpoint::open(dir)?;
        let cfg = &checkpoint.meta.config;
        let mut ps = ParamStore::new(DType::F32, cfg.seed);
        let encoder = Encoder::new(&mut ps, "encoder", &cfg.encoder)?;
        let (transducer, vocab) = match &checkpoint.meta.vocab {
            Some(tokens) => {
                let vocab = Vocabulary::from_tokens(tokens.clone())?;
                let t = Transducer::new(&mut ps, TRANSDUCER_PREFIX, cfg.encoder.d_model, vocab.len(), &cfg.stage.transducer)?;
                (Some(t), Some(vocab))
            }
            None => (None, None),
        };
        ps.load(&checkpoint.params_path())?;
        Ok(Self {
            ps,
            encoder,
            transducer,
            vocab,
            checkpoint,
        })
    }
}

fn open_parent(path: &Option<PathBuf>, what: &str, kind: StageKind, phase: Phase) -> Result<Checkpoint> {
    let parents = allowed_parents(kind, phase);
    let names: Vec<&str> = parents.iter().map(|p| p.name()).collect();
    let path = path.as_ref().ok_or_else(|| {
        Error::Prerequisite(format!("{kind} needs a {what} checkpoint from {}", names.join(" or ")))
    })?;
    let ck = Checkpoint::open(path)?;
    ck.require_complete()?;
    if !parents.contains(&ck.meta.stage) {
        return Err(Error::Lineage(format!(
            "{kind} cannot use a {} checkpoint as {what} (expected {})",
            ck.meta.stage,
            names.join(" or ")
        )));
    }
    validate_lineage(&ck.full_lineage())?;
    Ok(ck)
}

fn train_utterances(cfg: &PipelineConfig) -> Result<Vec<Utterance>> {
    let manifest = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::config("data.train_manifest", "required for training"))?;
    let utts = load_utterances(manifest, cfg.data.feature_cache.as_deref())?;
    if utts.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no utterances", manifest.display())));
    }
    Ok(utts)
}

/// Runs one training stage and writes its checkpoint to `out`.
pub fn run_stage(cfg: &PipelineConfig, inputs: &StageInputs, out: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let kind = cfg.stage.kind;
    let phase = cfg.stage.phase;
    let (objective, policy) = stage_plan(cfg);

    // Prerequisites and lineage.
    let mut init_encoder: Option<PathBuf> = None;
    let mut lineage: Vec<LineageEntry> = Vec::new();
    let mut label_store: Option<PseudoLabelStore> = None;
    let mut tap = None;
    let mut warm_decoder: Option<Checkpoint> = None;
    match objective {
        Objective::Distillation => {
            let teacher = open_parent(&inputs.teacher, "teacher", kind, phase)?;
            let labels_dir = inputs
                .labels
                .as_ref()
                .ok_or_else(|| Error::Prerequisite(format!("{kind} needs a pseudo-label store")))?;
            let labels = PseudoLabelStore::load(labels_dir)?;
            if labels.source.checkpoint != teacher.meta.checkpoint_id {
                return Err(Error::Lineage(format!(
                    "pseudo-labels come from {}, teacher is {}",
                    labels.source.checkpoint, teacher.meta.checkpoint_id
                )));
            }
            tap = Some(labels.source.block_index);
            label_store = Some(labels);
            if cfg.stage.student_init == StudentInit::Teacher {
                init_encoder = Some(teacher.params_path());
            }
            lineage = teacher.full_lineage();
        }
        _ if !allowed_parents(kind, phase).is_empty() => {
            let init = open_parent(&inputs.init, "initial", kind, phase)?;
            init_encoder = Some(init.params_path());
            lineage = init.full_lineage();
            if kind == StageKind::S4 && cfg.stage.warm_start_decoder {
                let s2 = lineage
                    .iter()
                    .find(|e| e.stage == StageKind::S2)
                    .ok_or_else(|| Error::Prerequisite("warm_start_decoder needs an S2 ancestor".into()))?;
                warm_decoder = Some(Checkpoint::open(&s2.path)?);
            }
        }
        _ => {
            if inputs.init.is_some() || inputs.teacher.is_some() {
                return Err(Error::InvalidInput(format!("{kind} ({phase:?}) trains from scratch; no init/teacher allowed")));
            }
        }
    }

    let mut utts = train_utterances(cfg)?;
    if objective == Objective::Transducer {
        let before = utts.len();
        utts.retain(|u| u.transcript.as_deref().is_some_and(|t| !t.trim().is_empty()));
        if utts.len() < before {
            tracing::warn!(excluded = before - utts.len(), "untranscribed utterances excluded from transducer training");
        }
        if utts.is_empty() {
            return Err(Error::InvalidInput("no transcribed utterances for transducer training".into()));
        }
    }

    let mut ps = ParamStore::new(DType::F32, cfg.seed);
    let encoder = Encoder::new(&mut ps, "encoder", &cfg.encoder)?;
    let d_model = cfg.encoder.d_model;
    let mut vocab_tokens = None;
    let head = match objective {
        Objective::MaskedPrediction => {
            let b = &cfg.stage.brq;
            let q = RandomQuantizer::new(cfg.encoder.frontend_dim, b.d_q, b.codebook_size, cfg.seed ^ QUANTIZER_SEED_SALT)?;
            let codes = utts.iter().map(|u| brq_codes(&u.input, &q)).collect::<Result<_>>()?;
            Head::MaskedPrediction {
                head: Linear::new(&mut ps, "brq_head", d_model, b.codebook_size)?,
                codes,
            }
        }
        Objective::Distillation => {
            let store = label_store.as_ref().expect("checked above");
            let labels = utts
                .iter()
                .map(|u| {
                    let l = store.entries.get(&u.utt_id).ok_or_else(|| {
                        Error::Prerequisite(format!("no pseudo-labels for {}", u.utt_id))
                    })?;
                    if l.len() != u.input.len() {
                        return Err(Error::Shape(format!(
                            "{}: {} pseudo-labels for {} frames",
                            u.utt_id,
                            l.len(),
                            u.input.len()
                        )));
                    }
                    Ok(l.clone())
                })
                .collect::<Result<_>>()?;
            Head::Distillation {
                head: Linear::new(&mut ps, "distill_head", d_model, store.k)?,
                labels,
            }
        }
        Objective::Transducer => {
            let vocab = match &warm_decoder {
                Some(ck) => Vocabulary::from_tokens(
                    ck.meta.vocab.clone().ok_or_else(|| Error::Prerequisite("S2 checkpoint has no vocabulary".into()))?,
                )?,
                None => Vocabulary::from_utterances(&utts),
            };
            let labels = utts.iter().map(|u| vocab.encode(&u.words())).collect::<Result<_>>()?;
            let model = Transducer::new(&mut ps, TRANSDUCER_PREFIX, d_model, vocab.len(), &cfg.stage.transducer)?;
            vocab_tokens = Some(vocab.tokens.clone());
            Head::Transducer { model, labels }
        }
    };

    if let Some(p) = &init_encoder {
        let loaded = ps.load_prefix(p, ENCODER_PREFIX)?;
        if loaded.is_empty() {
            return Err(Error::Prerequisite(format!("{} holds no encoder parameters", p.display())));
        }
    }
    if let Some(ck) = &warm_decoder {
        ps.load_prefix(&ck.params_path(), &format!("{TRANSDUCER_PREFIX}."))?;
    }

    let mut adam = Adam::new(cfg.optimizer.adam());
    let mut losses: Vec<LossRecord> = Vec::new();
    let mut start = 0;
    if let Some(dir) = &inputs.resume {
        let ck = Checkpoint::open(dir)?;
        if ck.meta.config != *cfg {
            return Err(Error::InvalidInput("resume checkpoint was written with a different config".into()));
        }
        if ck.meta.lineage != lineage {
            return Err(Error::Lineage("resume checkpoint has a different lineage".into()));
        }
        ps.load(&ck.params_path())?;
        adam = Adam::load(cfg.optimizer.adam(), ck.meta.step, &ck.optimizer_path())?;
        losses = ck.meta.losses.clone();
        start = ck.meta.step;
    }

    let lengths: Vec<usize> = utts.iter().map(|u| u.input.len()).collect();
    let total = cfg.optimizer.total_steps;
    let stop = inputs.stop_at.unwrap_or(total).min(total);
    let span = cfg.span_frames();
    let save = |ps: &ParamStore, adam: &Adam, step: usize, losses: &[LossRecord]| -> Result<()> {
        let param_hash = ps.hash()?;
        let meta = CheckpointMeta {
            checkpoint_id: checkpoint_id(kind, &param_hash),
            stage: kind,
            phase,
            step,
            total_steps: total,
            complete: step >= total,
            rng_state: RngState {
                seed: cfg.seed,
                next_step: step,
            },
            config: cfg.clone(),
            lineage: lineage.clone(),
            vocab: vocab_tokens.clone(),
            encoder_params: ps.num_params_with_prefix(ENCODER_PREFIX),
            total_params: ps.num_params(),
            encoder_hash: ps.hash_with_prefix(ENCODER_PREFIX)?,
            param_hash,
            losses: losses.to_vec(),
            tap,
        };
        save_checkpoint(out, ps, Some(adam), &meta)
    };

    for step in start..stop {
        let idx = batch_indices(&lengths, cfg.data.batch_size, cfg.seed, step);
        let mut rng = step_rng(cfg.seed, "step", step);
        let ctx = policy.context(&mut rng)?;
        let loss: Tensor;
        let value: f64;
        match &head {
            Head::MaskedPrediction { head, codes } => {
                // Resample until at least one frame in the batch is masked.
                let masks = loop {
                    let m = idx
                        .iter()
                        .map(|&i| sample_span_mask(lengths[i], span, cfg.stage.brq.p_start, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    if m.iter().any(|m| m.count() > 0) || cfg.stage.brq.p_start == 0.0 {
                        break m;
                    }
                };
                let noisy = idx
                    .iter()
                    .zip(&masks)
                    .map(|(&i, m)| apply_span_mask(&utts[i].input, m, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let batch = make_batch(&noisy.iter().collect::<Vec<_>>())?;
                let h = encode(&encoder, &batch.x, &batch.lens, &ctx)?;
                let rows = valid_rows(&head.forward(&h)?, &batch.lens)?;
                let targets: Vec<u32> = idx.iter().flat_map(|&i| codes[i].iter().copied()).collect();
                let masked: Vec<bool> = masks.iter().flat_map(|m| m.masked.iter().copied()).collect();
                loss = brq_loss(&rows, &targets, &masked)?;
                value = scalar_f64(&loss)?;
            }
            Head::Distillation { head, labels } => {
                let batch = make_batch(&idx.iter().map(|&i| &utts[i].input).collect::<Vec<_>>())?;
                let h = encode(&encoder, &batch.x, &batch.lens, &ctx)?;
                let rows = valid_rows(&head.forward(&h)?, &batch.lens)?;
                let targets: Vec<u32> = idx.iter().flat_map(|&i| labels[i].iter().copied()).collect();
                loss = distill_loss(&rows, &targets)?;
                value = scalar_f64(&loss)?;
            }
            Head::Transducer { model, labels } => {
                let aug: Vec<_> = idx
                    .iter()
                    .map(|&i| specaug(&utts[i].input, &cfg.stage.specaug, &mut rng))
                    .collect();
                let batch = make_batch(&aug.iter().collect::<Vec<_>>())?;
                let h = encode(&encoder, &batch.x, &batch.lens, &ctx)?;
                let rows: Vec<Vec<u32>> = idx.iter().map(|&i| labels[i].clone()).collect();
                let l = model.loss(&h, &batch.lens, &rows)?;
                loss = l.surrogate;
                value = l.value;
            }
        }
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss at step {}", step + 1)));
        }
        let grads = loss.backward()?;
        adam.update(&ps, &grads, |_| true)?;
        losses.push(LossRecord { step: step + 1, loss: value });
        if cfg.stage.log_every > 0 && (step + 1) % cfg.stage.log_every == 0 {
            let recent = &losses[losses.len().saturating_sub(cfg.stage.log_every)..];
            let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
            tracing::info!(stage = %kind, step = step + 1, loss = mean, ctx = %ctx.label(), "train");
        }
        let every = cfg.stage.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < stop {
            save(&ps, &adam, step + 1, &losses)?;
        }
    }
    save(&ps, &adam, stop.max(start), &losses)?;
    Checkpoint::open(out)
}

fn encode(encoder: &Encoder, x: &Tensor, lens: &[usize], ctx: &ContextSpec) -> Result<Tensor> {
    let mask = mask_for_context(x.dim(1)?, ctx)?;
    let taps = encoder.forward_batch(x, lens, &mask)?;
    Ok(taps.into_iter().last().expect("at least the frontend tap"))
}

/// Mean of the recorded losses over steps `[from, to]` (1-based, inclusive).
pub fn mean_loss(losses: &[LossRecord], from: usize, to: usize) -> Option<f64> {
    let v: Vec<f64> = losses.iter().filter(|r| r.step >= from && r.step <= to).map(|r| r.loss).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Encoder-parameter counts keyed by checkpoint id.
pub fn encoder_param_counts(checkpoints: &[&Checkpoint]) -> HashMap<String, usize> {
    checkpoints
        .iter()
        .map(|c| (c.meta.checkpoint_id.clone(), c.meta.encoder_params))
        .collect()
}
