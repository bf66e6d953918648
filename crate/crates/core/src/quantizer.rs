//! Teacher embedding extraction and k-means pseudo-labels.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::frontend::EncoderInput;
use crate::maskgen::ContextSpec;
use crate::tensor_file::{read_json, read_matrix, read_u32, write_json, write_matrix, write_u32, TensorMeta};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSource {
    pub checkpoint: String,
    pub block_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub source: EmbeddingSource,
    pub entries: BTreeMap<String, Array2<f32>>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex<S> {
    source: S,
    utts: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    utt_id: String,
    file: String,
    shape: Vec<usize>,
}

impl EmbeddingStore {
    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|m| m.ncols())
    }

    pub fn total_frames(&self) -> usize {
        self.entries.values().map(|m| m.nrows()).sum()
    }

    /// All frames stacked in utterance-id order.
    pub fn frames(&self) -> Result<Array2<f32>> {
        let views: Vec<_> = self.entries.values().map(|m| m.view()).collect();
        if views.is_empty() {
            return Err(Error::InvalidInput("empty embedding store".into()));
        }
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut utts = Vec::new();
        for (i, (utt, m)) in self.entries.iter().enumerate() {
            let file = format!("{i:06}.bin");
            let meta = write_matrix(&dir.join(&file), m)?;
            utts.push(IndexEntry {
                utt_id: utt.clone(),
                file,
                shape: meta.shape,
            });
        }
        write_json(
            &dir.join("index.json"),
            &StoreIndex {
                source: self.source.clone(),
                utts,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: StoreIndex<EmbeddingSource> = read_json(&dir.join("index.json"))?;
        let mut entries = BTreeMap::new();
        for e in index.utts {
            let meta = TensorMeta {
                shape: e.shape,
                dtype: crate::tensor_file::DType::F32,
            };
            entries.insert(e.utt_id, read_matrix(&dir.join(&e.file), &meta)?);
        }
        Ok(Self {
            source: index.source,
            entries,
        })
    }
}

/// Runs the encoder with full context and keeps block `block_index` output.
pub fn extract_embeddings(
    encoder: &Encoder,
    checkpoint_id: &str,
    block_index: usize,
    inputs: &[(String, EncoderInput)],
) -> Result<EmbeddingStore> {
    let n_blocks = encoder.config().n_blocks;
    if block_index >= n_blocks {
        return Err(Error::InvalidInput(format!(
            "block index {block_index} out of range for {n_blocks} blocks"
        )));
    }
    let mut entries = BTreeMap::new();
    for (utt, input) in inputs {
        let out = encoder.forward(input, &ContextSpec::FULL)?;
        entries.insert(utt.clone(), out.block(block_index).clone());
    }
    Ok(EmbeddingStore {
        source: EmbeddingSource {
            checkpoint: checkpoint_id.to_string(),
            block_index,
        },
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Fraction of frames used for fitting (uniform subsample).
    pub sample_fraction: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 64,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
            sample_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
    /// Inertia after each assignment step, non-increasing.
    pub inertia_history: Vec<f64>,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub centroids: Array2<f32>,
    pub info: FitInfo,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `c` (ties toward the lower index) and its squared distance.
fn nearest(x: &[f64], c: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, ck) in c.iter().enumerate() {
        let d = sq_dist(x, ck);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            // Guard against rounding landing on a zero-weight tail point.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// k-means++ seeding, then Lloyd iterations until the relative inertia
/// improvement drops below `tol` or `max_iters` is reached.
pub fn kmeans_fit(points: &Array2<f32>, cfg: &KmeansConfig) -> Result<Centroids> {
    let (n, dim) = points.dim();
    if cfg.k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if n < cfg.k {
        return Err(Error::InvalidInput(format!("{n} points for {} clusters", cfg.k)));
    }
    let pts: Vec<Vec<f64>> = points
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = kmeans_plus_plus(&pts, cfg.k, &mut rng);
    let assign_all = |c: &[Vec<f64>]| -> (Vec<(usize, f64)>, f64) {
        let a: Vec<(usize, f64)> = pts.iter().map(|p| nearest(p, c)).collect();
        let total = a.iter().map(|x| x.1).sum();
        (a, total)
    };
    let (mut assigned, mut inertia) = assign_all(&centers);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while inertia > 0.0 && iterations < cfg.max_iters {
        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &(c, _)) in pts.iter().zip(&assigned) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        for k in 0..cfg.k {
            if counts[k] > 0 {
                next[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        // Re-seed empty clusters at the points farthest from their centroid.
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for k in 0..cfg.k {
            if counts[k] == 0 {
                if let Some(i) = far.next() {
                    next[k] = pts[i].clone();
                }
            }
        }
        let (next_assigned, next_inertia) = assign_all(&next);
        if next_inertia > inertia {
            // Rounding-level regression: keep the current solution.
            break;
        }
        let improvement = (inertia - next_inertia) / inertia;
        centers = next;
        assigned = next_assigned;
        inertia = next_inertia;
        history.push(inertia);
        iterations += 1;
        if improvement < cfg.tol {
            break;
        }
    }
    let centroids = Array2::from_shape_fn((cfg.k, dim), |(k, j)| centers[k][j] as f32);
    Ok(Centroids {
        centroids,
        info: FitInfo {
            k: cfg.k,
            dim,
            seed: cfg.seed,
            iterations,
            inertia,
            inertia_history: history,
            n_points: n,
        },
    })
}

/// Fits on the store's frames, uniformly subsampled by `cfg.sample_fraction`.
pub fn kmeans_fit_store(store: &EmbeddingStore, cfg: &KmeansConfig) -> Result<Centroids> {
    let all = store.frames()?;
    if !(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0) {
        return Err(Error::config(
            "kmeans.sample_fraction",
            format!("{} outside (0, 1]", cfg.sample_fraction),
        ));
    }
    if cfg.sample_fraction >= 1.0 {
        return kmeans_fit(&all, cfg);
    }
    let n = all.nrows();
    let m = ((n as f64 * cfg.sample_fraction).round() as usize).clamp(cfg.k.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    kmeans_fit(&all.select(Axis(0), &idx), cfg)
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_matrix(&dir.join("centroids.bin"), &self.centroids)?;
        write_json(&dir.join("centroids.json"), &self.info)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let info: FitInfo = read_json(&dir.join("centroids.json"))?;
        let meta = TensorMeta {
            shape: vec![info.k, info.dim],
            dtype: crate::tensor_file::DType::F32,
        };
        Ok(Self {
            centroids: read_matrix(&dir.join("centroids.bin"), &meta)?,
            info,
        })
    }
}

/// Nearest centroid per row, ties toward the lower index.
pub fn assign_points(points: &Array2<f32>, c: &Centroids) -> Result<Vec<u32>> {
    if points.ncols() != c.centroids.ncols() {
        return Err(Error::Shape(format!(
            "{}-dim points vs {}-dim centroids",
            points.ncols(),
            c.centroids.ncols()
        )));
    }
    let cs: Vec<Vec<f64>> = c
        .centroids
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    Ok(points
        .rows()
        .into_iter()
        .map(|r| {
            let p: Vec<f64> = r.iter().map(|&v| v as f64).collect();
            nearest(&p, &cs).0 as u32
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    pub k: usize,
    pub source: EmbeddingSource,
    pub entries: BTreeMap<String, Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct LabelSource {
    k: usize,
    embeddings: EmbeddingSource,
}

pub fn assign(store: &EmbeddingStore, c: &Centroids) -> Result<PseudoLabelStore> {
    let mut entries = BTreeMap::new();
    for (utt, m) in &store.entries {
        entries.insert(utt.clone(), assign_points(m, c)?);
    }
    Ok(PseudoLabelStore {
        k: c.k(),
        source: store.source.clone(),
        entries,
    })
}

impl PseudoLabelStore {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut utts = Vec::new();
        for (i, (utt, codes)) in self.entries.iter().enumerate() {
            let file = format!("{i:06}.bin");
            write_u32(&dir.join(&file), codes)?;
            utts.push(IndexEntry {
                utt_id: utt.clone(),
                file,
                shape: vec![codes.len()],
            });
        }
        write_json(
            &dir.join("index.json"),
            &StoreIndex {
                source: LabelSource {
                    k: self.k,
                    embeddings: self.source.clone(),
                },
                utts,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: StoreIndex<LabelSource> = read_json(&dir.join("index.json"))?;
        let mut entries = BTreeMap::new();
        for e in index.utts {
            let codes = read_u32(&dir.join(&e.file), e.shape.first().copied().unwrap_or(0))?;
            if let Some(&bad) = codes.iter().find(|&&c| c as usize >= index.source.k) {
                return Err(Error::InvalidInput(format!(
                    "{}: code {bad} outside [0, {})",
                    e.utt_id, index.source.k
                )));
            }
            entries.insert(e.utt_id, codes);
        }
        Ok(Self {
            k: index.source.k,
            source: index.source.embeddings,
            entries,
        })
    }
}
