//! End-to-end chains: S1 → S2 → tap selection → k-means targets → S3 → S4 →
//! evaluation grid, and the pretraining-strategy ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Phase, PipelineConfig, StageKind, Tap};
use super::data::load_utterances;
use super::eval::{evaluate_grid, GridReport};
use super::train::{run_stage, LoadedModel, StageInputs};
use crate::maskgen::ContextSpec;
use crate::probe::{layer_sweep, ProbeDataset, ProbeKind, ProbeReport};
use crate::quantizer::{assign, extract_embeddings, kmeans_fit_store};
use crate::tensor_file::write_json;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub s1: StagePlan,
    pub s2: StagePlan,
    pub s3: StagePlan,
    pub s4: StagePlan,
}

impl RecipeConfig {
    /// Budgets sized for the toy encoder on the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            s1: StagePlan { steps: 150, warmup_steps: 30, lr: 2e-3 },
            s2: StagePlan { steps: 500, warmup_steps: 80, lr: 2e-3 },
            s3: StagePlan { steps: 150, warmup_steps: 30, lr: 2e-3 },
            s4: StagePlan { steps: 500, warmup_steps: 80, lr: 2e-3 },
        }
    }

    /// Every stage budget multiplied by `f` (at least one step).
    pub fn scaled(&self, f: f64) -> Self {
        let s = |p: StagePlan| StagePlan {
            steps: ((p.steps as f64 * f).round() as usize).max(1),
            warmup_steps: ((p.warmup_steps as f64 * f).round() as usize).max(1),
            lr: p.lr,
        };
        Self {
            s1: s(self.s1),
            s2: s(self.s2),
            s3: s(self.s3),
            s4: s(self.s4),
        }
    }
}

pub fn stage_config(base: &PipelineConfig, kind: StageKind, phase: Phase, plan: StagePlan) -> PipelineConfig {
    let mut cfg = base.clone();
    cfg.stage.kind = kind;
    cfg.stage.phase = phase;
    cfg.optimizer.total_steps = plan.steps;
    cfg.optimizer.warmup_steps = plan.warmup_steps;
    cfg.optimizer.lr = plan.lr;
    cfg
}

/// Tap block for distillation: fixed, or the best dev ASR layer of a probe sweep.
pub fn select_tap(teacher: &Path, cfg: &PipelineConfig) -> Result<(usize, Option<ProbeReport>)> {
    match cfg.stage.tap {
        Tap::Block(i) => Ok((i, None)),
        Tap::Auto => {
            let model = LoadedModel::open(teacher)?;
            let train = cfg
                .data
                .train_manifest
                .as_deref()
                .ok_or_else(|| Error::config("data.train_manifest", "required for tap=auto"))?;
            let data = ProbeDataset::load(train, None, cfg.data.feature_cache.as_deref(), cfg.probe.dev_fraction, cfg.seed)?;
            let report = layer_sweep(&model, &data, &[ProbeKind::AsrCtc], &[ContextSpec::FULL], &cfg.probe, cfg.seed)?;
            let tap = report
                .best_layer(ProbeKind::AsrCtc, &ContextSpec::FULL)
                .expect("sweep covers the full context");
            Ok((tap, Some(report)))
        }
    }
}

/// Teacher embeddings at `tap` → k-means → per-frame pseudo-labels. Writes
/// `embeddings/`, `centroids/` and `labels/` under `out`; returns the labels dir.
pub fn distill_targets(teacher: &Path, tap: usize, cfg: &PipelineConfig, out: &Path) -> Result<PathBuf> {
    let model = LoadedModel::open(teacher)?;
    model.checkpoint.require_complete()?;
    let train = cfg
        .data
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::config("data.train_manifest", "required for distillation targets"))?;
    let utts = load_utterances(train, cfg.data.feature_cache.as_deref())?;
    let inputs: Vec<_> = utts.into_iter().map(|u| (u.utt_id, u.input)).collect();
    let store = extract_embeddings(&model.encoder, &model.checkpoint.meta.checkpoint_id, tap, &inputs)?;
    store.save(&out.join("embeddings"))?;
    let centroids = kmeans_fit_store(&store, &cfg.stage.kmeans)?;
    centroids.save(&out.join("centroids"))?;
    let labels = assign(&store, &centroids)?;
    let dir = out.join("labels");
    labels.save(&dir)?;
    Ok(dir)
}

fn test_utterances(cfg: &PipelineConfig) -> Result<Vec<super::data::Utterance>> {
    let test = cfg
        .data
        .test_manifest
        .as_deref()
        .ok_or_else(|| Error::config("data.test_manifest", "required for evaluation"))?;
    load_utterances(test, cfg.data.feature_cache.as_deref())
}

pub fn evaluate_checkpoint(dir: &Path, cfg: &PipelineConfig) -> Result<GridReport> {
    let model = LoadedModel::open(dir)?;
    evaluate_grid(&model, &cfg.eval.grid, &test_utterances(cfg)?, cfg.eval.streaming_rows)
}

#[derive(Debug, Clone)]
pub struct RecipeOutputs {
    pub s1: Checkpoint,
    pub s2: Checkpoint,
    pub s3: Checkpoint,
    pub s4: Checkpoint,
    pub tap: usize,
    pub tap_report: Option<ProbeReport>,
    pub labels: PathBuf,
    pub grid: GridReport,
}

/// Runs the four stages into `out/{s1,s2,targets,s3,s4}` and evaluates S4.
pub fn run_recipe(base: &PipelineConfig, plan: &RecipeConfig, out: &Path) -> Result<RecipeOutputs> {
    let s1 = run_stage(
        &stage_config(base, StageKind::S1, Phase::Pretrain, plan.s1),
        &StageInputs::default(),
        &out.join("s1"),
    )?;
    let s2 = run_stage(
        &stage_config(base, StageKind::S2, Phase::Finetune, plan.s2),
        &StageInputs {
            init: Some(s1.dir.clone()),
            ..Default::default()
        },
        &out.join("s2"),
    )?;
    let (tap, tap_report) = select_tap(&s2.dir, base)?;
    if let Some(r) = &tap_report {
        r.write(&out.join("tap_sweep"))?;
    }
    let labels = distill_targets(&s2.dir, tap, base, &out.join("targets"))?;
    let s3 = run_stage(
        &stage_config(base, StageKind::S3, Phase::Pretrain, plan.s3),
        &StageInputs {
            teacher: Some(s2.dir.clone()),
            labels: Some(labels.clone()),
            ..Default::default()
        },
        &out.join("s3"),
    )?;
    let s4 = run_stage(
        &stage_config(base, StageKind::S4, Phase::Finetune, plan.s4),
        &StageInputs {
            init: Some(s3.dir.clone()),
            ..Default::default()
        },
        &out.join("s4"),
    )?;
    let grid = evaluate_checkpoint(&s4.dir, base)?;
    grid.write(&out.join("s4_grid"))?;
    Ok(RecipeOutputs {
        s1,
        s2,
        s3,
        s4,
        tap,
        tap_report,
        labels,
        grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub pretrained: String,
    pub finetuned: String,
    pub encoder_params: usize,
    /// WER per grid context, in grid order.
    pub wer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub contexts: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,pretrained,finetuned,encoder_params");
        for c in &self.contexts {
            let _ = write!(s, ",wer[{c}]");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.strategy, r.pretrained, r.finetuned, r.encoder_params);
            for w in &r.wer {
                let _ = write!(s, ",{w:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        write_json(&json, self)?;
        Ok(vec![csv, json])
    }
}

fn ablation_row(strategy: &str, pretrained: &Checkpoint, finetuned: &Checkpoint, grid: &GridReport) -> AblationRow {
    AblationRow {
        strategy: strategy.into(),
        pretrained: pretrained.meta.checkpoint_id.clone(),
        finetuned: finetuned.meta.checkpoint_id.clone(),
        encoder_params: finetuned.meta.encoder_params,
        wer: grid.rows.iter().map(|r| r.wer).collect(),
    }
}

/// Compares the three dual-mode pretraining strategies, each followed by the
/// same S4 budget: BestRQ under sampled masks, distillation from E1 (the S1
/// checkpoint), and distillation from E2 (the main recipe's S3/S4).
pub fn run_ablation(base: &PipelineConfig, plan: &RecipeConfig, main: &RecipeOutputs, out: &Path) -> Result<AblationReport> {
    let s4_cfg = stage_config(base, StageKind::S4, Phase::Finetune, plan.s4);

    let brq_dm = run_stage(
        &stage_config(base, StageKind::BrqDm, Phase::Pretrain, plan.s1),
        &StageInputs::default(),
        &out.join("brq_dm"),
    )?;
    let brq_dm_s4 = run_stage(
        &s4_cfg,
        &StageInputs {
            init: Some(brq_dm.dir.clone()),
            ..Default::default()
        },
        &out.join("brq_dm_s4"),
    )?;

    let labels_e1 = distill_targets(&main.s1.dir, main.tap, base, &out.join("targets_e1"))?;
    let from_e1 = run_stage(
        &stage_config(base, StageKind::DistillFromE1, Phase::Pretrain, plan.s3),
        &StageInputs {
            teacher: Some(main.s1.dir.clone()),
            labels: Some(labels_e1),
            ..Default::default()
        },
        &out.join("distill_e1"),
    )?;
    let from_e1_s4 = run_stage(
        &s4_cfg,
        &StageInputs {
            init: Some(from_e1.dir.clone()),
            ..Default::default()
        },
        &out.join("distill_e1_s4"),
    )?;

    let grid_brq = evaluate_checkpoint(&brq_dm_s4.dir, base)?;
    let grid_e1 = evaluate_checkpoint(&from_e1_s4.dir, base)?;
    let report = AblationReport {
        contexts: main.grid.rows.iter().map(|r| r.label.clone()).collect(),
        rows: vec![
            ablation_row("brq_dm", &brq_dm, &brq_dm_s4, &grid_brq),
            ablation_row("distill_from_e1", &from_e1, &from_e1_s4, &grid_e1),
            ablation_row("distill_from_e2", &main.s3, &main.s4, &main.grid),
        ],
    };
    report.write(out)?;
    Ok(report)
}
