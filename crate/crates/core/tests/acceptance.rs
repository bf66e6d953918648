//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3,8` runs a subset; `ACCEPTANCE_KEEP=<dir>` keeps the
//! end-to-end artifacts there instead of a temp dir.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use dualmode_core::audio_io::synth_dataset;
use dualmode_core::encoder::{Encoder, EncoderConfig};
use dualmode_core::maskgen::{build_mask, to_frames, AttentionMask, Context, ContextSpec, Frames, SamplingSpace};
use dualmode_core::maskgen::verify_no_lookahead_accumulation;
use dualmode_core::nn::ParamStore;
use dualmode_core::objectives::{ctc_loss, masked_cross_entropy, rnnt_loss, sample_span_mask, RnntLattice};
use dualmode_core::pipeline::{Phase, PipelineConfig, StageKind, Tap};
use dualmode_core::pipeline::recipe::{run_ablation, run_recipe, stage_config, RecipeConfig, RecipeOutputs, StagePlan};
use dualmode_core::pipeline::{load_utterances, run_stage, LoadedModel, StageInputs};
use dualmode_core::probe::{dtw_corr, layer_sweep, wer, DtwConfig, ProbeDataset, ProbeKind};
use dualmode_core::quantizer::{kmeans_fit, KmeansConfig};
use dualmode_core::frontend::EncoderInput;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn(&mut Shared) -> Outcome;

/// End-to-end state shared by criteria 7–10.
#[derive(Default)]
struct Shared {
    root: Option<PathBuf>,
    _tmp: Option<tempfile::TempDir>,
    base: Option<PipelineConfig>,
    recipe: Option<Result<RecipeOutputs, String>>,
    recipe_secs: f64,
}

impl Shared {
    fn root(&mut self) -> PathBuf {
        if self.root.is_none() {
            let root = match std::env::var_os("ACCEPTANCE_KEEP") {
                Some(d) => PathBuf::from(d),
                None => {
                    let t = tempfile::tempdir().expect("temp dir");
                    let p = t.path().to_path_buf();
                    self._tmp = Some(t);
                    p
                }
            };
            std::fs::create_dir_all(&root).expect("artifact root");
            self.root = Some(root);
        }
        self.root.clone().unwrap()
    }

    fn base(&mut self) -> PipelineConfig {
        if self.base.is_none() {
            let root = self.root();
            let ds = synth_dataset(&root.join("data"), 250, 11).expect("synthetic corpus");
            let mut cfg = PipelineConfig::default();
            cfg.seed = 5;
            cfg.data.train_manifest = Some(ds.train);
            cfg.data.test_manifest = Some(ds.test);
            cfg.data.feature_cache = Some(root.join("features"));
            cfg.stage.tap = Tap::Block(2);
            cfg.stage.log_every = 50;
            self.base = Some(cfg);
        }
        self.base.clone().unwrap()
    }

    fn recipe(&mut self) -> Result<&RecipeOutputs, String> {
        if self.recipe.is_none() {
            let base = self.base();
            let root = self.root();
            let t = Instant::now();
            self.recipe = Some(run_recipe(&base, &RecipeConfig::toy(), &root.join("recipe")).map_err(|e| e.to_string()));
            self.recipe_secs = t.elapsed().as_secs_f64();
        }
        self.recipe.as_ref().unwrap().as_ref().map_err(|e| e.clone())
    }
}

// ---------------------------------------------------------------- criterion 1

/// Independent oracle: boolean matrix powers of the allow matrix.
fn reach_oracle(mask: &AttentionMask, layers: usize) -> Vec<usize> {
    let n = mask.len();
    let a: Vec<Vec<bool>> = (0..n).map(|t| (0..n).map(|s| mask.allows(t, s)).collect()).collect();
    let mut r = a.clone();
    for _ in 1..layers {
        r = (0..n)
            .map(|t| (0..n).map(|s| (0..n).any(|k| r[t][k] && a[k][s])).collect())
            .collect();
    }
    r.iter().map(|row| row.iter().rposition(|&x| x).unwrap_or(0)).collect()
}

fn criterion_1(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let space = SamplingSpace::t1();
    let mut checked = 0;
    let mut failures = Vec::new();
    for &lb in &space.l_past {
        for &la in &space.l_future {
            let (lbf, laf) = (to_frames(lb).unwrap(), to_frames(la).unwrap());
            for t in 1..=64 {
                let mask = build_mask(t, lbf, laf).unwrap();
                for layers in 1..=20 {
                    checked += 1;
                    if !verify_no_lookahead_accumulation(&mask, layers).unwrap() {
                        failures.push(format!("T={t} lb={lb} la={la} L={layers}"));
                    }
                }
                // Cross-check against the oracle on small sizes.
                if t <= 24 && reach_oracle(&mask, 6) != reach_oracle(&mask, 1) {
                    failures.push(format!("oracle disagrees: T={t} lb={lb} la={la}"));
                }
            }
        }
    }
    let window = AttentionMask::from_fn(8, |t, s| s <= t + 2);
    let counter = verify_no_lookahead_accumulation(&window, 2).unwrap();
    let oracle_counter = reach_oracle(&window, 2)[0];
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && !counter && oracle_counter == 4 && secs < 10.0;
    outcome(
        pass,
        format!(
            "{checked} (T, lb, la, L) cases, {} failures; fixed-window counterexample -> {counter} (frame 0 reaches {oracle_counter}); {secs:.2}s{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut worst: f32 = 0.0;
    let mut worst_case = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50u64 {
        let mut ps = ParamStore::new(DType::F32, 1000 + trial);
        let enc = Encoder::new(&mut ps, "encoder", &EncoderConfig::toy()).unwrap();
        let t = rng.gen_range(8..=128);
        let frames = Array2::from_shape_fn((t, 512), |_| rng.gen_range(-2.0f32..2.0));
        let input = EncoderInput { frames };
        let lb = match rng.gen_range(0..3) {
            0 => Context::Inf,
            1 => Context::Seconds(5.4),
            _ => Context::Seconds(1.0),
        };
        for la in [0usize, 2, 5] {
            let ctx = ContextSpec::new(lb, Context::Seconds(la as f64 * 0.04));
            assert_eq!(ctx.la_frames().unwrap(), Frames::Finite(la));
            let full = enc.forward(&input, &ctx).unwrap();
            let stream = enc.stream_utterance(&input, &ctx).unwrap();
            for (a, b) in full.hidden.iter().zip(&stream.hidden) {
                let d = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
                if d > worst {
                    worst = d;
                    worst_case = format!("trial {trial}, T={t}, lb={lb}, la={la}");
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 120.0,
        format!("max |streaming - masked| = {worst:.2e} over 50 encoders x 3 look-aheads (worst: {worst_case}); {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m
}

/// -log P(y|x) by enumerating every transducer alignment.
fn rnnt_enumerate(logits: &[f64], t_len: usize, labels: &[u32], v: usize) -> f64 {
    let u_len = labels.len();
    let lp = |t: usize, u: usize| log_softmax(&logits[(t * (u_len + 1) + u) * v..(t * (u_len + 1) + u + 1) * v]);
    let mut paths = Vec::new();
    fn walk(t: usize, u: usize, acc: f64, t_len: usize, labels: &[u32], lp: &dyn Fn(usize, usize) -> Vec<f64>, out: &mut Vec<f64>) {
        let row = lp(t, u);
        if t == t_len - 1 && u == labels.len() {
            out.push(acc + row[0]);
            return;
        }
        if u < labels.len() {
            walk(t, u + 1, acc + row[labels[u] as usize], t_len, labels, lp, out);
        }
        if t + 1 < t_len {
            walk(t + 1, u, acc + row[0], t_len, labels, lp, out);
        }
    }
    walk(0, 0, 0.0, t_len, labels, &lp, &mut paths);
    -logsumexp(&paths)
}

/// -log P(y|x) by enumerating all V^T frame paths and collapsing them.
fn ctc_enumerate(logits: &[f64], t_len: usize, labels: &[u32], v: usize) -> f64 {
    let rows: Vec<Vec<f64>> = (0..t_len).map(|t| log_softmax(&logits[t * v..(t + 1) * v])).collect();
    let mut terms = Vec::new();
    let total = v.pow(t_len as u32);
    for code in 0..total {
        let mut c = code;
        let mut path = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            path.push((c % v) as u32);
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = u32::MAX;
        for &p in &path {
            if p != prev && p != 0 {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == labels {
            terms.push(path.iter().enumerate().map(|(t, &p)| rows[t][p as usize]).sum());
        }
    }
    -logsumexp(&terms)
}

fn fd_rel_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let h = 1e-5;
    let mut num = vec![0.0; x.len()];
    let mut y = x.to_vec();
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y);
        y[i] = x[i] - h;
        let down = f(&y);
        y[i] = x[i];
        num[i] = (up - down) / (2.0 * h);
    }
    let err = num.iter().zip(grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = num.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-8);
    err / scale
}

fn criterion_3(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut max_rnnt, mut max_ctc, mut max_fd) = (0f64, 0f64, 0f64);
    let (mut n_rnnt, mut n_ctc, mut n_fd) = (0, 0, 0);
    for t in 1..=4usize {
        for u in 0..=3usize {
            for v in 2..=4usize {
                for draw in 0..100 {
                    let labels: Vec<u32> = (0..u).map(|_| rng.gen_range(1..v as u32)).collect();
                    let lat = RnntLattice { frames: t, labels: u, vocab: v };
                    let x: Vec<f64> = (0..t * (u + 1) * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let got = rnnt_loss(&x, lat, &labels).unwrap();
                    max_rnnt = max_rnnt.max((got.loss - rnnt_enumerate(&x, t, &labels, v)).abs());
                    n_rnnt += 1;
                    if draw < 3 {
                        let f = |y: &[f64]| rnnt_loss(y, lat, &labels).unwrap().loss;
                        max_fd = max_fd.max(fd_rel_error(&f, &x, &got.grad));
                        n_fd += 1;
                    }

                    let xc: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
                    if u + repeats <= t {
                        let got = ctc_loss(&xc, t, v, &labels).unwrap();
                        max_ctc = max_ctc.max((got.loss - ctc_enumerate(&xc, t, &labels, v)).abs());
                        n_ctc += 1;
                        if draw < 3 {
                            let f = |y: &[f64]| ctc_loss(y, t, v, &labels).unwrap().loss;
                            max_fd = max_fd.max(fd_rel_error(&f, &xc, &got.grad));
                            n_fd += 1;
                        }
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        max_rnnt <= 1e-6 && max_ctc <= 1e-6 && max_fd <= 1e-4 && secs < 120.0,
        format!(
            "rnnt {n_rnnt} draws max |Δ| {max_rnnt:.1e}; ctc {n_ctc} draws max |Δ| {max_ctc:.1e}; {n_fd} finite-difference checks max rel {max_fd:.1e}; {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(_: &mut Shared) -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for k in [1024usize, 2500] {
        let logits = Tensor::zeros((16, k), DType::F32, &Device::Cpu).unwrap();
        let targets: Vec<u32> = (0..16).map(|i| (i * 37 % k) as u32).collect();
        let loss = masked_cross_entropy(&logits, &targets, &[1.0; 16]).unwrap();
        let v = loss.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        let err = (v - (k as f64).ln()).abs();
        pass &= err <= 1e-6;
        details.push(format!("K={k}: {v:.7} vs ln K {:.7} (|Δ| {err:.1e})", (k as f64).ln()));
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5(_: &mut Shared) -> Outcome {
    let expected = 1.0 - 0.98f64.powi(8);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut masked, mut total) = (0usize, 0usize);
    for _ in 0..200 {
        let m = sample_span_mask(2000, 8, 0.02, &mut rng).unwrap();
        masked += m.count();
        total += m.masked.len();
    }
    let frac = masked as f64 / total as f64;
    outcome(
        (frac - expected).abs() <= 0.02,
        format!("masked fraction {frac:.4} vs 1-(1-0.02)^8 = {expected:.4} over {total} frames"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut monotone = true;
    let mut fits = 0;
    for trial in 0..20u64 {
        let n = rng.gen_range(50..400);
        let d = rng.gen_range(1..12);
        let pts = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0));
        let k = rng.gen_range(1..16.min(n));
        let c = kmeans_fit(&pts, &KmeansConfig { k, seed: trial, tol: 0.0, ..KmeansConfig::default() }).unwrap();
        monotone &= c.info.inertia_history.windows(2).all(|w| w[1] <= w[0]);
        fits += 1;
    }
    // Two unit-variance blobs ten sigma apart.
    let mut truth = Vec::new();
    let blobs = Array2::from_shape_fn((200, 4), |(i, j)| {
        let _ = j;
        (if i < 100 { 0.0 } else { 10.0 }) + normal(&mut rng)
    });
    truth.extend((0..200).map(|i| usize::from(i >= 100)));
    let mut recovered = true;
    for seed in 0..5 {
        let c = kmeans_fit(&blobs, &KmeansConfig { k: 2, seed, ..KmeansConfig::default() }).unwrap();
        let a = dualmode_core::quantizer::assign_points(&blobs, &c).unwrap();
        let flip = a[0] != 0;
        recovered &= a.iter().zip(&truth).all(|(&x, &t)| (x as usize == t) != flip);
    }
    let cfg = KmeansConfig { k: 8, seed: 9, ..KmeansConfig::default() };
    let pts = Array2::from_shape_fn((500, 6), |_| rng.gen_range(-1.0f32..1.0));
    let a = kmeans_fit(&pts, &cfg).unwrap();
    let b = kmeans_fit(&pts, &cfg).unwrap();
    let bits = a.centroids.iter().zip(b.centroids.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    outcome(
        monotone && recovered && bits,
        format!("monotone inertia on {fits} fits: {monotone}; two-blob exact recovery (5 seeds): {recovered}; bit-identical refit: {bits}"),
    )
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    use rand_distr::Distribution;
    rand_distr::Normal::new(0.0f32, 1.0).unwrap().sample(rng)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(sh: &mut Shared) -> Outcome {
    let base = sh.base();
    let root = sh.root();
    let tiny = StagePlan { steps: 2, warmup_steps: 1, lr: 1e-3 };
    let baseline = (|| -> dualmode_core::Result<_> {
        let pre = run_stage(
            &stage_config(&base, StageKind::BaselineStreaming, Phase::Pretrain, tiny),
            &StageInputs::default(),
            &root.join("baseline_pre"),
        )?;
        run_stage(
            &stage_config(&base, StageKind::BaselineStreaming, Phase::Finetune, tiny),
            &StageInputs { init: Some(pre.dir.clone()), ..Default::default() },
            &root.join("baseline_ft"),
        )
    })();
    let baseline = match baseline {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("baseline failed: {e}")),
    };
    let r = match sh.recipe() {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("recipe failed: {e}")),
    };
    let counts = [r.s3.meta.encoder_params, r.s4.meta.encoder_params, baseline.meta.encoder_params];
    let same_counts = counts.iter().all(|&c| c == counts[0]);
    let one_ckpt = r.grid.rows.len() == base.eval.grid.len() && r.grid.checkpoint_id == r.s4.meta.checkpoint_id;
    outcome(
        same_counts && one_ckpt,
        format!(
            "encoder params E3={} E4={} baseline={}; grid of {} contexts served by {} (encoder hash {})",
            counts[0],
            counts[1],
            counts[2],
            r.grid.rows.len(),
            r.grid.checkpoint_id,
            &r.grid.encoder_hash[..12]
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(sh: &mut Shared) -> Outcome {
    let n_utts = {
        let base = sh.base();
        let tr = load_utterances(base.data.train_manifest.as_deref().unwrap(), None).map(|u| u.len()).unwrap_or(0);
        let te = load_utterances(base.data.test_manifest.as_deref().unwrap(), None).map(|u| u.len()).unwrap_or(0);
        tr + te
    };
    let r = match sh.recipe() {
        Ok(r) => r.clone(),
        Err(e) => return outcome(false, format!("recipe failed: {e}")),
    };
    let wer_at = |ctx: ContextSpec| r.grid.row(&ctx).map(|row| row.wer).unwrap_or(f64::NAN);
    let full = wer_at(ContextSpec::FULL);
    let stream = wer_at(ContextSpec::seconds(5.4, 0.0));
    let la1 = wer_at(ContextSpec::seconds(5.4, 1.0));
    let secs = sh.recipe_secs;
    let pass = n_utts >= 200
        && stream >= full
        && full <= 0.3
        && stream <= 0.3
        && stream + 0.02 >= la1
        && secs < 1800.0;
    outcome(
        pass,
        format!(
            "{n_utts} utterances; WER(inf,inf)={full:.4} WER(5.4,1)={la1:.4} WER(5.4,0.6)={:.4} WER(5.4,0)={stream:.4}; S1-S4 + eval {secs:.0}s",
            wer_at(ContextSpec::seconds(5.4, 0.6))
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(sh: &mut Shared) -> Outcome {
    let base = sh.base();
    let root = sh.root();
    let r = match sh.recipe() {
        Ok(r) => r.clone(),
        Err(e) => return outcome(false, format!("recipe failed: {e}")),
    };
    let t0 = Instant::now();
    match run_ablation(&base, &RecipeConfig::toy(), &r, &root.join("ablation")) {
        Ok(rep) => {
            let table_ok = rep.rows.len() == 3
                && rep.rows.iter().all(|row| row.wer.len() == rep.contexts.len() && row.wer.iter().all(|w| w.is_finite()))
                && root.join("ablation/ablation.csv").exists();
            let mut ranking: Vec<(String, f64)> = rep
                .rows
                .iter()
                .map(|row| (row.strategy.clone(), row.wer.last().copied().unwrap_or(f64::NAN)))
                .collect();
            ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
            let ranked: Vec<String> = ranking.iter().map(|(s, w)| format!("{s}={w:.3}")).collect();
            println!("{}", rep.to_csv().trim_end());
            outcome(
                table_ok,
                format!(
                    "3 strategies completed; streaming-WER ranking (reported, not asserted): {}; {:.0}s",
                    ranked.join(" < "),
                    t0.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, format!("ablation failed: {e}")),
    }
}

// --------------------------------------------------------------- criterion 10

fn criterion_10(sh: &mut Shared) -> Outcome {
    // Unit anchors first.
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let mut anchors = wer(&toks("a b c"), &toks("a b c")) == 0.0
        && (wer(&toks("a b c"), &toks("a x c")) - 1.0 / 3.0).abs() < 1e-12
        && (wer(&toks("a b"), &toks("a b c")) - 0.5).abs() < 1e-12;
    let dtw = DtwConfig::default();
    let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin() + 0.3 * (i as f64 * 0.11).cos()).collect();
    let ramp: Vec<f64> = (0..40).map(|i| (i as f64).powf(1.5)).collect();
    let neg: Vec<f64> = ramp.iter().map(|v| -v).collect();
    let mut delayed = vec![x[0]; 3];
    delayed.extend_from_slice(&x[..57]);
    let mut perm = x.clone();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(7));
    anchors &= dtw_corr(&x, &x, &dtw).unwrap() == 0.0
        && (dtw_corr(&ramp, &neg, &dtw).unwrap() - 2.0).abs() < 1e-2
        && dtw_corr(&x, &delayed, &dtw).unwrap() < dtw_corr(&x, &perm, &dtw).unwrap();

    let base = sh.base();
    let root = sh.root();
    let s4 = match sh.recipe() {
        Ok(r) => r.s4.dir.clone(),
        Err(e) => return outcome(false, format!("recipe failed: {e}")),
    };
    let run = || -> dualmode_core::Result<_> {
        let model = LoadedModel::open(&s4)?;
        let data = ProbeDataset::load(
            base.data.train_manifest.as_deref().unwrap(),
            base.data.test_manifest.as_deref(),
            base.data.feature_cache.as_deref(),
            base.probe.dev_fraction,
            base.seed,
        )?;
        let mut cfg = base.probe.clone();
        cfg.steps = 80;
        layer_sweep(&model, &data, &ProbeKind::ALL, &[ContextSpec::FULL], &cfg, base.seed)
    };
    let t0 = Instant::now();
    let (a, b) = match (run(), run()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("layer sweep failed: {e}")),
    };
    let _ = a.write(&root.join("layer_sweep"));
    let n_blocks = base.encoder.n_blocks;
    let complete = a.rows.len() == n_blocks * ProbeKind::ALL.len();
    let deterministic = a == b;
    let frozen = a.encoder_frozen() && b.encoder_frozen();
    let mut best = BTreeMap::new();
    for s in &a.summary {
        best.insert(s.task.name(), s.best_layer);
    }
    outcome(
        anchors && complete && deterministic && frozen,
        format!(
            "{} rows ({n_blocks} blocks x {} tasks); rerun identical: {deterministic}; encoder frozen: {frozen}; metric anchors: {anchors}; best layer per task {best:?}; {:.0}s",
            a.rows.len(),
            ProbeKind::ALL.len(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let checks: [(usize, &str, Check); 10] = [
        (1, "mask non-accumulation", criterion_1),
        (2, "streaming/offline equivalence", criterion_2),
        (3, "loss oracles", criterion_3),
        (4, "uniform-CE anchors", criterion_4),
        (5, "span-mask coverage", criterion_5),
        (6, "k-means", criterion_6),
        (7, "zero additional parameters", criterion_7),
        (8, "end-to-end trend", criterion_8),
        (9, "ablation harness", criterion_9),
        (10, "probe harness", criterion_10),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let o = check(&mut shared);
        failed += usize::from(!o.pass);
        println!(
            "criterion {n:>2} {:<32} {} — {} [{:.1}s]",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
