//! JSON run configuration: sections `data`, `encoder`, `stage`, `optimizer`,
//! `eval` and `probe`, with dotted `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::maskgen::{ContextSpec, SamplingSpace};
use crate::nn::AdamConfig;
use crate::objectives::SpecAugConfig;
use crate::quantizer::KmeansConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    S1,
    S2,
    S3,
    S4,
    BaselineStreaming,
    BaselineFullContext,
    BrqDm,
    DistillFromE1,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::S1 => "s1",
            StageKind::S2 => "s2",
            StageKind::S3 => "s3",
            StageKind::S4 => "s4",
            StageKind::BaselineStreaming => "baseline_streaming",
            StageKind::BaselineFullContext => "baseline_full_context",
            StageKind::BrqDm => "brq_dm",
            StageKind::DistillFromE1 => "distill_from_e1",
        }
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, StageKind::BaselineStreaming | StageKind::BaselineFullContext)
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Baselines are pretrained and then fine-tuned in their single mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Teacher block for pseudo-labels: a fixed index or chosen by a layer sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Auto,
    Block(usize),
}

impl Serialize for Tap {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tap::Auto => ser.serialize_str("auto"),
            Tap::Block(i) => ser.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Tap {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(de)? {
            Value::String(s) if s == "auto" => Ok(Tap::Auto),
            Value::String(s) => s
                .parse()
                .map(Tap::Block)
                .map_err(|_| serde::de::Error::custom(format!("tap must be \"auto\" or a block index, got {s:?}"))),
            Value::Number(n) => n
                .as_u64()
                .map(|i| Tap::Block(i as usize))
                .ok_or_else(|| serde::de::Error::custom("tap must be a non-negative integer")),
            other => Err(serde::de::Error::custom(format!("invalid tap {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Directory of cached encoder inputs written by `prepare`.
    pub feature_cache: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            feature_cache: None,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrqConfig {
    pub d_q: usize,
    pub codebook_size: usize,
    /// Span length in encoder frames; `None` takes the stage default
    /// (8 frames = 320 ms, or 10 frames = 400 ms for the full-context baseline).
    pub span_frames: Option<usize>,
    pub p_start: f64,
}

impl Default for BrqConfig {
    fn default() -> Self {
        Self {
            d_q: 16,
            codebook_size: 1024,
            span_frames: None,
            p_start: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransducerConfig {
    pub embed_dim: usize,
    pub pred_hidden: usize,
    pub pred_layers: usize,
    pub joint_dim: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            pred_hidden: 128,
            pred_layers: 2,
            joint_dim: 256,
            max_symbols_per_frame: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Scratch,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub kind: StageKind,
    pub phase: Phase,
    /// Named sampling space (`T1`, `T2`, `T3`) for variable-mask stages.
    pub sampling_space: String,
    pub brq: BrqConfig,
    pub specaug: SpecAugConfig,
    pub transducer: TransducerConfig,
    pub kmeans: KmeansConfig,
    pub tap: Tap,
    pub student_init: StudentInit,
    /// Initialize S4's prediction and joint networks from the S2 checkpoint.
    pub warm_start_decoder: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            kind: StageKind::S1,
            phase: Phase::Pretrain,
            sampling_space: "T1".into(),
            brq: BrqConfig::default(),
            specaug: SpecAugConfig::default(),
            transducer: TransducerConfig::default(),
            kmeans: KmeansConfig::default(),
            tap: Tap::Block(2),
            student_init: StudentInit::Scratch,
            warm_start_decoder: false,
            checkpoint_every: 0,
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            warmup_steps: a.warmup_steps,
            grad_clip: a.grad_clip,
            total_steps: 1000,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: Vec<ContextSpec>,
    /// Rows with finite look-ahead run through the chunked streaming path.
    pub streaming_rows: bool,
}

pub fn default_grid() -> Vec<ContextSpec> {
    vec![
        ContextSpec::FULL,
        ContextSpec::seconds(5.4, 1.0),
        ContextSpec::seconds(5.4, 0.6),
        ContextSpec::seconds(5.4, 0.0),
    ]
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            streaming_rows: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub tasks: Vec<crate::probe::ProbeKind>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mlp_hidden: usize,
    /// Inference contexts probed from the same checkpoint.
    pub contexts: Vec<ContextSpec>,
    pub dtw_window: usize,
    pub dtw_zero_variance_cost: f64,
    /// Fraction of the training manifest held out as the probe dev split.
    pub dev_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        use crate::probe::ProbeKind::*;
        Self {
            tasks: vec![AsrCtc, Classification, SpeakingRate, PitchContour, IntensityContour],
            steps: 150,
            lr: 3e-3,
            batch_size: 8,
            mlp_hidden: 64,
            contexts: vec![ContextSpec::FULL],
            dtw_window: 5,
            dtw_zero_variance_cost: 1.0,
            dev_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub stage: StageConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::toy(),
            stage: StageConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.data.batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be >= 1"));
        }
        if self.optimizer.total_steps == 0 {
            return Err(Error::config("optimizer.total_steps", "must be >= 1"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if SamplingSpace::preset(&self.stage.sampling_space).is_none() {
            return Err(Error::config(
                "stage.sampling_space",
                format!("unknown space {:?} (expected T1, T2 or T3)", self.stage.sampling_space),
            ));
        }
        let b = &self.stage.brq;
        if b.d_q == 0 || b.codebook_size == 0 {
            return Err(Error::config("stage.brq", "d_q and codebook_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&b.p_start) {
            return Err(Error::config("stage.brq.p_start", "must lie in [0, 1]"));
        }
        if b.span_frames == Some(0) {
            return Err(Error::config("stage.brq.span_frames", "must be >= 1"));
        }
        let t = &self.stage.transducer;
        if t.pred_layers == 0 || t.pred_hidden == 0 || t.joint_dim == 0 || t.embed_dim == 0 {
            return Err(Error::config("stage.transducer", "sizes must be >= 1"));
        }
        if t.max_symbols_per_frame == 0 {
            return Err(Error::config("stage.transducer.max_symbols_per_frame", "must be >= 1"));
        }
        if self.stage.kmeans.k == 0 {
            return Err(Error::config("stage.kmeans.k", "must be >= 1"));
        }
        if let Tap::Block(i) = self.stage.tap {
            if i >= self.encoder.n_blocks {
                return Err(Error::config(
                    "stage.tap",
                    format!("block {i} out of range for {} blocks", self.encoder.n_blocks),
                ));
            }
        }
        if self.eval.grid.is_empty() {
            return Err(Error::config("eval.grid", "must contain at least one context"));
        }
        for (i, c) in self.eval.grid.iter().chain(&self.probe.contexts).enumerate() {
            c.lb_frames().and(c.la_frames()).map_err(|e| Error::config(format!("eval.grid[{i}]"), e.to_string()))?;
        }
        if self.probe.dtw_window < 2 {
            return Err(Error::config("probe.dtw_window", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.probe.dev_fraction) {
            return Err(Error::config("probe.dev_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Span length for this stage: explicit, or 10 frames (400 ms) for the
    /// full-context baseline and 8 frames (320 ms) otherwise.
    pub fn span_frames(&self) -> usize {
        self.stage.brq.span_frames.unwrap_or(match self.stage.kind {
            StageKind::BaselineFullContext => 10,
            _ => 8,
        })
    }

    pub fn sampling_space(&self) -> SamplingSpace {
        SamplingSpace::preset(&self.stage.sampling_space).expect("validated")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(&self.to_value()).expect("config serializes");
        let d = Sha256::digest(s.as_bytes());
        d.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// File config (if any), then `key=value` overrides, then `seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let defaults = PipelineConfig::default().to_value();
        let mut value = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file_value: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
            merge(&mut value, &file_value, &defaults, "")?;
        }
        for ov in overrides {
            apply_override(&mut value, &defaults, ov)?;
        }
        if let Some(s) = seed {
            value["seed"] = Value::from(s);
        }
        let cfg: PipelineConfig =
            serde_json::from_value(value).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keys whose values are free-form (maps or lists) rather than fixed structs.
fn is_leaf(default: &Value) -> bool {
    !matches!(default, Value::Object(_))
}

fn merge(dst: &mut Value, src: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    let Value::Object(src_map) = src else {
        return Err(Error::config(
            if prefix.is_empty() { "<root>" } else { prefix },
            "expected an object",
        ));
    };
    for (k, v) in src_map {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(def) = defaults.get(k) else {
            return Err(Error::config(path, "unknown key"));
        };
        if is_leaf(def) || def.as_object().is_some_and(|m| m.is_empty()) {
            dst[k] = v.clone();
        } else {
            merge(&mut dst[k], v, def, &path)?;
        }
    }
    Ok(())
}

/// `a.b.c=value`: value parsed as JSON, falling back to a plain string.
pub fn apply_override(value: &mut Value, defaults: &Value, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must look like key=value"))?;
    let key = key.trim();
    let mut def = defaults;
    let mut target = &mut *value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let path = parts[..=i].join(".");
        def = def.get(*part).ok_or_else(|| Error::config(&path, "unknown key"))?;
        if i + 1 < parts.len() && is_leaf(def) {
            return Err(Error::config(&path, "is not a section"));
        }
        target = target
            .get_mut(*part)
            .ok_or_else(|| Error::config(&path, "unknown key"))?;
    }
    *target = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok(())
}
