use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualmode_core::maskgen::{allow_csv, build_mask, reach_csv, verify_no_lookahead_accumulation, Frames};
use dualmode_core::pipeline::config::{Phase, PipelineConfig, StageKind};
use dualmode_core::pipeline::recipe::{evaluate_checkpoint, select_tap};
use dualmode_core::pipeline::{load_utterances, run_stage, LoadedModel, StageInputs};
use dualmode_core::probe::{layer_sweep, run_probes, LayerSelection, ProbeDataset};
use dualmode_core::quantizer::{assign, extract_embeddings, kmeans_fit_store, EmbeddingStore};
use dualmode_core::tensor_file::write_json;
use dualmode_core::{audio_io, Error};
use serde_json::{json, Value};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "DUALMODE_OUT";

#[derive(Parser, Debug)]
#[command(name = "dualmode", version, about = "Dual-mode (streaming + full-context) speech encoder pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file with sections data, encoder, stage, optimizer, eval, probe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `optimizer.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each run gets `<subcommand>-<timestamp>-<config hash>` inside it.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// Checkpoint the encoder is initialized from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume from a partial checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop (and checkpoint) at this step.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic tone-word corpus with train/test manifests.
    SynthData {
        #[arg(long, default_value_t = 250)]
        n: usize,
    },
    /// Compute and cache encoder inputs for the configured manifests.
    Prepare,
    /// Self-supervised pretraining (s1, brq_dm or a baseline's pretraining).
    Pretrain(TrainArgs),
    /// Transducer fine-tuning (s2 or a baseline's fine-tuning).
    Finetune(TrainArgs),
    /// Teacher embeddings at the configured tap over the training manifest.
    ExtractEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// k-means on an embedding store, then per-frame pseudo-labels.
    Kmeans {
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Pseudo-label distillation under sampled masks (s3 or distill_from_e1).
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Dual-mode transducer fine-tuning (s4).
    FinetuneDual(TrainArgs),
    /// WER of one checkpoint under every context of the evaluation grid.
    EvalGrid {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train probes on a frozen checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block index or `all` for a learned weighted sum.
        #[arg(long, default_value = "all")]
        layer: String,
    },
    /// One probe per (block, task) with a metric-vs-layer report.
    LayerSweep {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print an attention mask and its multi-layer reachability.
    AnalyzeMasks {
        #[arg(long = "T")]
        t: usize,
        /// Look-back in frames; omit for unbounded.
        #[arg(long)]
        lb_frames: Option<usize>,
        /// Look-ahead in frames; omit for unbounded.
        #[arg(long)]
        la_frames: Option<usize>,
        #[arg(long, default_value_t = 2)]
        layers: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Prepare => "prepare",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::ExtractEmbeddings { .. } => "extract-embeddings",
            Command::Kmeans { .. } => "kmeans",
            Command::Distill { .. } => "distill",
            Command::FinetuneDual(_) => "finetune-dual",
            Command::EvalGrid { .. } => "eval-grid",
            Command::Probe { .. } => "probe",
            Command::LayerSweep { .. } => "layer-sweep",
            Command::AnalyzeMasks { .. } => "analyze-masks",
        }
    }
}

fn run_dir(root: &Path, command: &str, cfg: &PipelineConfig) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}-{stamp}-{}", cfg.hash());
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}.{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Stage kind for a training subcommand: the configured kind when it fits,
/// otherwise the subcommand's default.
fn stage_kind(cfg: &PipelineConfig, allowed: &[StageKind], command: &str) -> Result<StageKind, Error> {
    let kind = cfg.stage.kind;
    if allowed.contains(&kind) {
        return Ok(kind);
    }
    if kind == StageKind::S1 {
        return Ok(allowed[0]);
    }
    Err(Error::config(
        "stage.kind",
        format!(
            "{command} runs {}; got {kind}",
            allowed.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn train(cfg: &mut PipelineConfig, kind: StageKind, phase: Phase, inputs: StageInputs, dir: &Path) -> anyhow::Result<Value> {
    cfg.stage.kind = kind;
    cfg.stage.phase = phase;
    write_json(&dir.join("config.json"), cfg)?;
    let ck = run_stage(cfg, &inputs, &dir.join("checkpoint"))?;
    Ok(json!({
        "checkpoint": ck.dir,
        "checkpoint_id": ck.meta.checkpoint_id,
        "step": ck.meta.step,
        "complete": ck.meta.complete,
        "final_loss": ck.meta.losses.last().map(|l| l.loss),
    }))
}

fn probe_data(cfg: &PipelineConfig) -> Result<ProbeDataset, Error> {
    let train = cfg
        .data
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::config("data.train_manifest", "required for probing"))?;
    ProbeDataset::load(
        train,
        cfg.data.test_manifest.as_deref(),
        cfg.data.feature_cache.as_deref(),
        cfg.probe.dev_fraction,
        cfg.seed,
    )
}

fn dispatch(cli: Cli) -> anyhow::Result<Value> {
    let mut cfg = PipelineConfig::resolve(cli.common.config.as_deref(), &cli.common.overrides, cli.common.seed)?;
    let name = cli.command.name();
    let dir = run_dir(&cli.common.out, name, &cfg)?;
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(
        &dir.join("invocation.json"),
        &json!({ "subcommand": name, "config": cli.common.config, "overrides": cli.common.overrides, "seed": cfg.seed }),
    )?;
    let mut result = match cli.command {
        Command::SynthData { n } => {
            let ds = audio_io::synth_dataset(&dir.join("data"), n, cfg.seed)?;
            json!({ "manifest": ds.manifest, "train": ds.train, "test": ds.test, "utterances": ds.entries.len() })
        }
        Command::Prepare => {
            let cache = cfg.data.feature_cache.clone().unwrap_or_else(|| dir.join("features"));
            let mut n = 0;
            for m in [&cfg.data.train_manifest, &cfg.data.test_manifest].into_iter().flatten() {
                n += load_utterances(m, Some(&cache))?.len();
            }
            if n == 0 {
                return Err(Error::config("data.train_manifest", "no manifest configured").into());
            }
            json!({ "feature_cache": cache, "utterances": n })
        }
        Command::Pretrain(a) => {
            use StageKind::*;
            let kind = stage_kind(&cfg, &[S1, BrqDm, BaselineStreaming, BaselineFullContext], name)?;
            let inputs = StageInputs { init: a.init, resume: a.resume, stop_at: a.stop_at, ..Default::default() };
            train(&mut cfg, kind, Phase::Pretrain, inputs, &dir)?
        }
        Command::Finetune(a) => {
            use StageKind::*;
            let kind = stage_kind(&cfg, &[S2, BaselineStreaming, BaselineFullContext], name)?;
            let inputs = StageInputs { init: a.init, resume: a.resume, stop_at: a.stop_at, ..Default::default() };
            train(&mut cfg, kind, Phase::Finetune, inputs, &dir)?
        }
        Command::Distill { teacher, labels, resume, stop_at } => {
            let kind = stage_kind(&cfg, &[StageKind::S3, StageKind::DistillFromE1], name)?;
            let inputs = StageInputs { teacher: Some(teacher), labels: Some(labels), resume, stop_at, ..Default::default() };
            train(&mut cfg, kind, Phase::Pretrain, inputs, &dir)?
        }
        Command::FinetuneDual(a) => {
            let inputs = StageInputs { init: a.init, resume: a.resume, stop_at: a.stop_at, ..Default::default() };
            train(&mut cfg, StageKind::S4, Phase::Finetune, inputs, &dir)?
        }
        Command::ExtractEmbeddings { checkpoint } => {
            let (tap, sweep) = select_tap(&checkpoint, &cfg)?;
            if let Some(r) = &sweep {
                r.write(&dir.join("tap_sweep"))?;
            }
            let model = LoadedModel::open(&checkpoint)?;
            model.checkpoint.require_complete()?;
            let train = cfg
                .data
                .train_manifest
                .as_deref()
                .ok_or_else(|| Error::config("data.train_manifest", "required"))?;
            let inputs: Vec<_> = load_utterances(train, cfg.data.feature_cache.as_deref())?
                .into_iter()
                .map(|u| (u.utt_id, u.input))
                .collect();
            let store = extract_embeddings(&model.encoder, &model.checkpoint.meta.checkpoint_id, tap, &inputs)?;
            let out = dir.join("embeddings");
            store.save(&out)?;
            json!({ "embeddings": out, "tap": tap, "frames": store.total_frames() })
        }
        Command::Kmeans { embeddings } => {
            let store = EmbeddingStore::load(&embeddings)?;
            let c = kmeans_fit_store(&store, &cfg.stage.kmeans)?;
            c.save(&dir.join("centroids"))?;
            let labels = assign(&store, &c)?;
            labels.save(&dir.join("labels"))?;
            json!({
                "centroids": dir.join("centroids"),
                "labels": dir.join("labels"),
                "k": c.k(),
                "inertia": c.info.inertia,
                "iterations": c.info.iterations,
            })
        }
        Command::EvalGrid { checkpoint } => {
            let report = evaluate_checkpoint(&checkpoint, &cfg)?;
            let files = report.write(&dir)?;
            json!({ "files": files, "rows": report.rows.iter().map(|r| json!({"context": r.label, "wer": r.wer})).collect::<Vec<_>>() })
        }
        Command::Probe { checkpoint, layer } => {
            let model = LoadedModel::open(&checkpoint)?;
            let sel = match layer.as_str() {
                "all" => LayerSelection::WeightedSum,
                s => LayerSelection::Single(
                    s.parse().map_err(|_| Error::config("--layer", format!("expected a block index or `all`, got {s:?}")))?,
                ),
            };
            let data = probe_data(&cfg)?;
            let report = run_probes(&model, &data, &cfg.probe.tasks, &[sel], &cfg.probe.contexts, &cfg.probe, cfg.seed)?;
            let files = report.write(&dir)?;
            json!({ "files": files, "encoder_frozen": report.encoder_frozen() })
        }
        Command::LayerSweep { checkpoint } => {
            let model = LoadedModel::open(&checkpoint)?;
            let data = probe_data(&cfg)?;
            let report = layer_sweep(&model, &data, &cfg.probe.tasks, &cfg.probe.contexts, &cfg.probe, cfg.seed)?;
            let files = report.write(&dir)?;
            json!({ "files": files, "rows": report.rows.len(), "encoder_frozen": report.encoder_frozen(), "summary": report.summary })
        }
        Command::AnalyzeMasks { t, lb_frames, la_frames, layers } => {
            let f = |v: Option<usize>| v.map_or(Frames::Inf, Frames::Finite);
            let mask = build_mask(t, f(lb_frames), f(la_frames))?;
            let allow = allow_csv(&mask);
            let reach = reach_csv(&mask, layers)?;
            std::fs::write(dir.join("allow.csv"), &allow).map_err(|e| Error::io(dir.join("allow.csv"), e))?;
            std::fs::write(dir.join("reach.csv"), &reach).map_err(|e| Error::io(dir.join("reach.csv"), e))?;
            print!("{allow}\n{reach}");
            json!({ "no_lookahead_accumulation": verify_no_lookahead_accumulation(&mask, layers)? })
        }
    };
    result["status"] = json!("ok");
    result["subcommand"] = json!(name);
    result["run_dir"] = json!(dir);
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, body) = match e.downcast_ref::<Error>() {
                Some(err @ Error::Config { key, message }) => {
                    (2, json!({ "status": "error", "kind": err.kind(), "key": key, "message": message }))
                }
                Some(err) => (1, json!({ "status": "error", "kind": err.kind(), "message": err.to_string() })),
                None => (1, json!({ "status": "error", "kind": "runtime", "message": format!("{e:#}") })),
            };
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
