//! Checkpoint directories: `params.safetensors`, `optimizer.safetensors`
//! and `meta.json`, written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Phase, PipelineConfig, StageKind};
use crate::nn::{Adam, ParamStore};
use crate::tensor_file::{read_json, write_json};
use crate::{Error, Result};

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const META_FILE: &str = "meta.json";
pub const ENCODER_PREFIX: &str = "encoder.";

/// Training resumes from `next_step` with per-step RNGs derived from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: StageKind,
    pub phase: Phase,
    pub checkpoint_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub checkpoint_id: String,
    pub stage: StageKind,
    pub phase: Phase,
    pub step: usize,
    pub total_steps: usize,
    pub complete: bool,
    pub rng_state: RngState,
    pub config: PipelineConfig,
    /// Ancestors, nearest first.
    pub lineage: Vec<LineageEntry>,
    /// Word vocabulary (blank first) when the checkpoint holds a transducer.
    pub vocab: Option<Vec<String>>,
    pub encoder_params: usize,
    pub total_params: usize,
    pub encoder_hash: String,
    pub param_hash: String,
    pub losses: Vec<LossRecord>,
    /// Teacher block whose clusters the stage was trained on (distillation).
    pub tap: Option<usize>,
}

impl CheckpointMeta {
    pub fn lineage_entry(&self, path: &Path) -> LineageEntry {
        LineageEntry {
            stage: self.stage,
            phase: self.phase,
            checkpoint_id: self.checkpoint_id.clone(),
            path: path.to_path_buf(),
        }
    }

    pub fn has_transducer(&self) -> bool {
        self.vocab.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(Error::Prerequisite(format!("no checkpoint at {}", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta: read_json(&meta_path)?,
        })
    }

    pub fn params_path(&self) -> PathBuf {
        self.dir.join(PARAMS_FILE)
    }

    pub fn optimizer_path(&self) -> PathBuf {
        self.dir.join(OPTIMIZER_FILE)
    }

    pub fn lineage_entry(&self) -> LineageEntry {
        self.meta.lineage_entry(&self.dir)
    }

    /// Lineage including this checkpoint, nearest first.
    pub fn full_lineage(&self) -> Vec<LineageEntry> {
        let mut l = vec![self.lineage_entry()];
        l.extend(self.meta.lineage.iter().cloned());
        l
    }

    pub fn require_complete(&self) -> Result<&Self> {
        if !self.meta.complete {
            return Err(Error::Prerequisite(format!(
                "checkpoint {} stopped at step {} of {}",
                self.dir.display(),
                self.meta.step,
                self.meta.total_steps
            )));
        }
        Ok(self)
    }
}

/// `stage-<first 16 hex of the parameter hash>`.
pub fn checkpoint_id(stage: StageKind, param_hash: &str) -> String {
    format!("{}-{}", stage.name(), &param_hash[..16.min(param_hash.len())])
}

/// Writes into a sibling temp directory and renames it into place.
pub fn save_checkpoint(dir: &Path, ps: &ParamStore, adam: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .to_string();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp~"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    ps.save(&tmp.join(PARAMS_FILE))?;
    if let Some(a) = adam {
        a.save(&tmp.join(OPTIMIZER_FILE))?;
    }
    write_json(&tmp.join(META_FILE), meta)?;
    let old = parent.join(format!(".{name}.old~"));
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

/// Stages a checkpoint of `stage`/`phase` may be initialized from.
pub fn allowed_parents(stage: StageKind, phase: Phase) -> &'static [StageKind] {
    use StageKind::*;
    match (stage, phase) {
        (S1 | BrqDm, _) => &[],
        (S2, _) => &[S1],
        (S3, _) => &[S2],
        (DistillFromE1, _) => &[S1],
        (S4, _) => &[S3, BrqDm, DistillFromE1],
        (BaselineStreaming, Phase::Pretrain) | (BaselineFullContext, Phase::Pretrain) => &[],
        (BaselineStreaming, Phase::Finetune) => &[BaselineStreaming],
        (BaselineFullContext, Phase::Finetune) => &[BaselineFullContext],
    }
}

/// Checks every link of a lineage chain (nearest first) against the stage DAG.
pub fn validate_lineage(chain: &[LineageEntry]) -> Result<()> {
    for pair in chain.windows(2) {
        let (child, parent) = (&pair[0], &pair[1]);
        if !allowed_parents(child.stage, child.phase).contains(&parent.stage) {
            return Err(Error::Lineage(format!(
                "{} ({}) cannot descend from {} ({})",
                child.stage, child.checkpoint_id, parent.stage, parent.checkpoint_id
            )));
        }
    }
    if let Some(root) = chain.last() {
        if !allowed_parents(root.stage, root.phase).is_empty() {
            return Err(Error::Lineage(format!(
                "lineage of {} ends at {} without its prerequisite",
                chain[0].checkpoint_id, root.stage
            )));
        }
    }
    Ok(())
}
