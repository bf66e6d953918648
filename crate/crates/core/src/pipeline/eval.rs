//! Inference-setting grid: WER of one checkpoint under several contexts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{validate_lineage, Checkpoint, ENCODER_PREFIX};
use super::data::Utterance;
use super::train::LoadedModel;
use crate::maskgen::{ContextSpec, Frames};
use crate::probe::metrics::{corpus_wer, wer_score};
use crate::tensor_file::write_json;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPath {
    /// One masked forward over the whole utterance.
    FullSequence,
    /// Chunk-by-chunk forward with caches.
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub context: ContextSpec,
    pub label: String,
    pub lb_frames: Option<usize>,
    pub la_frames: Option<usize>,
    pub path: EvalPath,
    pub wer: f64,
    pub edits: usize,
    pub ref_words: usize,
    pub utterances: usize,
    /// Utterances with an empty reference but a non-empty hypothesis.
    pub empty_reference_flags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub checkpoint_id: String,
    pub stage: String,
    pub encoder_hash: String,
    pub encoder_params: usize,
    /// Checkpoint ids from this checkpoint back to the root.
    pub lineage: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn row(&self, ctx: &ContextSpec) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.context == *ctx)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("checkpoint_id,context,lb_frames,la_frames,path,wer,edits,ref_words,utterances\n");
        let opt = |v: Option<usize>| v.map_or("inf".to_string(), |f| f.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{},{},{}",
                self.checkpoint_id,
                r.label,
                opt(r.lb_frames),
                opt(r.la_frames),
                match r.path {
                    EvalPath::FullSequence => "full_sequence",
                    EvalPath::Streaming => "streaming",
                },
                r.wer,
                r.edits,
                r.ref_words,
                r.utterances
            );
        }
        s
    }

    /// Writes `grid.csv` and `grid.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("grid.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("grid.json");
        write_json(&json, self)?;
        Ok(vec![csv, json])
    }
}

fn finite(f: Frames) -> Option<usize> {
    match f {
        Frames::Finite(n) => Some(n),
        Frames::Inf => None,
    }
}

/// Refuses checkpoints whose lineage breaks the stage DAG or whose recorded
/// ancestors were since replaced by different checkpoints.
pub fn check_lineage(ck: &Checkpoint) -> Result<()> {
    validate_lineage(&ck.full_lineage())?;
    for entry in &ck.meta.lineage {
        if entry.path.exists() {
            let parent = Checkpoint::open(&entry.path)?;
            if parent.meta.checkpoint_id != entry.checkpoint_id {
                return Err(Error::Lineage(format!(
                    "{} records ancestor {} at {}, which now holds {}",
                    ck.meta.checkpoint_id,
                    entry.checkpoint_id,
                    entry.path.display(),
                    parent.meta.checkpoint_id
                )));
            }
        } else {
            tracing::warn!(ancestor = %entry.checkpoint_id, path = %entry.path.display(), "ancestor checkpoint not found; lineage checked from metadata only");
        }
    }
    Ok(())
}

/// Corpus WER of the checkpoint's transducer under each grid context. With
/// `streaming_rows`, finite look-ahead rows run through the chunked path.
pub fn evaluate_grid(model: &LoadedModel, grid: &[ContextSpec], test: &[Utterance], streaming_rows: bool) -> Result<GridReport> {
    let ck = &model.checkpoint;
    ck.require_complete()?;
    check_lineage(ck)?;
    let (Some(transducer), Some(vocab)) = (&model.transducer, &model.vocab) else {
        return Err(Error::Prerequisite(format!(
            "{} has no transducer decoder; evaluate an S2, S4 or baseline fine-tuned checkpoint",
            ck.meta.checkpoint_id
        )));
    };
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty evaluation grid".into()));
    }
    let test: Vec<&Utterance> = test.iter().filter(|u| u.transcript.is_some()).collect();
    if test.is_empty() {
        return Err(Error::InvalidInput("no transcribed test utterances".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for ctx in grid {
        let (lb, la) = (ctx.lb_frames()?, ctx.la_frames()?);
        let path = if streaming_rows && la != Frames::Inf {
            EvalPath::Streaming
        } else {
            EvalPath::FullSequence
        };
        let mut scores = Vec::with_capacity(test.len());
        for u in &test {
            let out = match path {
                EvalPath::Streaming => model.encoder.stream_utterance(&u.input, ctx)?,
                EvalPath::FullSequence => model.encoder.forward(&u.input, ctx)?,
            };
            let hyp = vocab.decode(&transducer.greedy_decode(out.final_output())?);
            scores.push(wer_score(&u.words(), &hyp));
        }
        rows.push(GridRow {
            context: *ctx,
            label: ctx.label(),
            lb_frames: finite(lb),
            la_frames: finite(la),
            path,
            wer: corpus_wer(&scores),
            edits: scores.iter().map(|s| s.edits).sum(),
            ref_words: scores.iter().map(|s| s.ref_len).sum(),
            utterances: scores.len(),
            empty_reference_flags: scores.iter().filter(|s| s.empty_reference).count(),
        });
    }
    Ok(GridReport {
        checkpoint_id: ck.meta.checkpoint_id.clone(),
        stage: ck.meta.stage.name().to_string(),
        encoder_hash: model.ps.hash_with_prefix(ENCODER_PREFIX)?,
        encoder_params: ck.meta.encoder_params,
        lineage: ck.full_lineage().into_iter().map(|e| e.checkpoint_id).collect(),
        rows,
    })
}
