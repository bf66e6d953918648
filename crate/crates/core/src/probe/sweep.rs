//! Layer-wise sweeps and probe reports (CSV, JSON, SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{train_probe, LayerSelection, Metric, ProbeDataset, ProbeFeatures, ProbeKind};
use crate::maskgen::ContextSpec;
use crate::pipeline::checkpoint::ENCODER_PREFIX;
use crate::pipeline::config::ProbeConfig;
use crate::pipeline::train::LoadedModel;
use crate::tensor_file::write_json;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: ProbeKind,
    /// Block index, or `all` for a weighted sum.
    pub layer: String,
    pub context: String,
    pub metric: Metric,
    pub dev: f64,
    pub test: Option<f64>,
    pub final_loss: f64,
    pub layer_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: ProbeKind,
    pub context: String,
    pub argmax_layer: usize,
    pub argmin_layer: usize,
    /// Best dev layer given the metric's direction.
    pub best_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint_id: String,
    pub probe_config_hash: String,
    pub seed: u64,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    pub rows: Vec<ProbeRow>,
    pub summary: Vec<TaskSummary>,
}

impl ProbeReport {
    pub fn encoder_frozen(&self) -> bool {
        self.encoder_hash_before == self.encoder_hash_after
    }

    pub fn best_layer(&self, task: ProbeKind, ctx: &ContextSpec) -> Option<usize> {
        let label = ctx.label();
        self.summary
            .iter()
            .find(|s| s.task == task && s.context == label)
            .map(|s| s.best_layer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("checkpoint_id,seed,probe_config,task,layer,context,metric,dev,test,final_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6},{},{:.6}",
                self.checkpoint_id,
                self.seed,
                self.probe_config_hash,
                r.task.name(),
                r.layer,
                r.context,
                r.metric.name(),
                r.dev,
                r.test.map_or(String::new(), |t| format!("{t:.6}")),
                r.final_loss
            );
        }
        s
    }

    /// One SVG per task: dev metric against block index, one line per context.
    pub fn to_svg(&self, task: ProbeKind) -> String {
        let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.task == task) {
            let Ok(layer) = r.layer.parse::<usize>() else { continue };
            match series.iter_mut().find(|(c, _)| *c == r.context) {
                Some((_, pts)) => pts.push((layer, r.dev)),
                None => series.push((r.context.clone(), vec![(layer, r.dev)])),
            }
        }
        let (w, h, pad) = (480.0, 320.0, 48.0);
        let pts = series.iter().flat_map(|(_, p)| p.iter());
        let max_layer = pts.clone().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
        let (lo, hi) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
        let x = |l: usize| pad + (w - 2.0 * pad) * l as f64 / max_layer;
        let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
        let metric = task.metric().name();
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{} ({metric})</text>\n\
             <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">block</text>\n\
             <text x=\"6\" y=\"{}\">{hi:.3}</text>\n<text x=\"6\" y=\"{}\">{lo:.3}</text>\n",
            w / 2.0,
            task.name(),
            h - pad,
            w - pad,
            h - pad,
            h - pad,
            w / 2.0,
            h - 12.0,
            pad + 4.0,
            h - pad,
        );
        for (k, (ctx, pts)) in series.iter().enumerate() {
            let color = colors[k % colors.len()];
            let path: Vec<String> = pts.iter().map(|&(l, v)| format!("{:.1},{:.1}", x(l), y(v))).collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                path.join(" ")
            );
            for &(l, v) in pts {
                let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", x(l), y(v));
            }
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{ctx}</text>",
                w - pad - 90.0,
                pad + 14.0 * k as f64
            );
        }
        for l in 0..=max_layer as usize {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{l}</text>", x(l), h - pad + 14.0);
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `probe_report.{csv,json}` and `probe_<task>.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let csv = dir.join("probe_report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        written.push(csv);
        let json = dir.join("probe_report.json");
        write_json(&json, self)?;
        written.push(json);
        let tasks: std::collections::BTreeSet<ProbeKind> = self.rows.iter().map(|r| r.task).collect();
        for task in tasks {
            let p = dir.join(format!("probe_{}.svg", task.name()));
            fs::write(&p, self.to_svg(task)).map_err(|e| Error::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

fn config_hash(cfg: &ProbeConfig) -> String {
    let json = serde_json::to_string(cfg).expect("probe config serializes");
    let d = Sha256::digest(json.as_bytes());
    d.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn summarize(rows: &[ProbeRow]) -> Vec<TaskSummary> {
    let mut out: Vec<TaskSummary> = Vec::new();
    for r in rows {
        if out.iter().any(|s| s.task == r.task && s.context == r.context) {
            continue;
        }
        let group: Vec<(usize, f64)> = rows
            .iter()
            .filter(|q| q.task == r.task && q.context == r.context)
            .filter_map(|q| q.layer.parse().ok().map(|l| (l, q.dev)))
            .collect();
        if group.is_empty() {
            continue;
        }
        // Ties go to the lower layer.
        let argmax = group.iter().fold(group[0], |b, &p| if p.1 > b.1 { p } else { b }).0;
        let argmin = group.iter().fold(group[0], |b, &p| if p.1 < b.1 { p } else { b }).0;
        out.push(TaskSummary {
            task: r.task,
            context: r.context.clone(),
            argmax_layer: argmax,
            argmin_layer: argmin,
            best_layer: if r.metric.higher_is_better() { argmax } else { argmin },
        });
    }
    out
}

/// Trains probes for every `(task, selection)` under every context in
/// `contexts`, checking that the encoder parameters never change.
pub fn run_probes(
    model: &LoadedModel,
    data: &ProbeDataset,
    tasks: &[ProbeKind],
    selections: &[LayerSelection],
    contexts: &[ContextSpec],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let before = model.ps.hash_with_prefix(ENCODER_PREFIX)?;
    let mut rows = Vec::new();
    for ctx in contexts {
        let features = ProbeFeatures::compute(&model.encoder, data, ctx)?;
        for &task in tasks {
            for &sel in selections {
                let o = train_probe(&features, data, task, sel, cfg, seed)?;
                tracing::info!(task = task.name(), layer = %sel.label(), ctx = %ctx.label(), dev = o.dev, "probe");
                rows.push(ProbeRow {
                    task,
                    layer: sel.label(),
                    context: ctx.label(),
                    metric: o.metric,
                    dev: o.dev,
                    test: o.test,
                    final_loss: o.final_loss,
                    layer_weights: o.layer_weights,
                });
            }
        }
    }
    let after = model.ps.hash_with_prefix(ENCODER_PREFIX)?;
    if before != after {
        return Err(Error::InvalidInput("encoder parameters changed during probing".into()));
    }
    Ok(ProbeReport {
        checkpoint_id: model.checkpoint.meta.checkpoint_id.clone(),
        probe_config_hash: config_hash(cfg),
        seed,
        encoder_hash_before: before,
        encoder_hash_after: after,
        summary: summarize(&rows),
        rows,
    })
}

/// One single-block probe per `(block, task)` for each context.
pub fn layer_sweep(
    model: &LoadedModel,
    data: &ProbeDataset,
    tasks: &[ProbeKind],
    contexts: &[ContextSpec],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let sel: Vec<LayerSelection> = (0..model.encoder.config().n_blocks).map(LayerSelection::Single).collect();
    run_probes(model, data, tasks, &sel, contexts, cfg, seed)
}
