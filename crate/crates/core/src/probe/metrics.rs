//! Word error rate and DTW with a windowed correlation distance.

use crate::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerScore {
    pub wer: f64,
    pub edits: usize,
    pub ref_len: usize,
    /// Empty reference with a non-empty hypothesis: scored as `|hyp| / 1`.
    pub empty_reference: bool,
}

pub fn wer_score<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerScore {
    let edits = edit_distance(reference, hypothesis);
    let empty_reference = reference.is_empty() && !hypothesis.is_empty();
    WerScore {
        wer: edits as f64 / reference.len().max(1) as f64,
        edits,
        ref_len: reference.len(),
        empty_reference,
    }
}

/// Edit distance over reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    wer_score(reference, hypothesis).wer
}

/// Corpus WER: total edits over total reference tokens.
pub fn corpus_wer(scores: &[WerScore]) -> f64 {
    let edits: usize = scores.iter().map(|s| s.edits).sum();
    let words: usize = scores.iter().map(|s| s.ref_len).sum();
    edits as f64 / words.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtwConfig {
    pub window: usize,
    /// Local cost when either window is constant.
    pub zero_variance_cost: f64,
}

impl Default for DtwConfig {
    fn default() -> Self {
        Self {
            window: 5,
            zero_variance_cost: 1.0,
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    // Relative threshold so a constant window with rounding noise still counts as constant.
    let flat = |ss: f64, v: &[f64]| ss <= 1e-12 * v.iter().map(|x| x * x).sum::<f64>() || ss == 0.0;
    if flat(saa, a) || flat(sbb, b) {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// DTW between the sliding windows of two contours with local cost
/// `1 - pearson`, normalized by the warping path length.
pub fn dtw_corr(pred: &[f64], reference: &[f64], cfg: &DtwConfig) -> Result<f64> {
    let w = cfg.window;
    if w < 2 {
        return Err(Error::InvalidInput(format!("dtw window must be ≥ 2, got {w}")));
    }
    if pred.len() < w || reference.len() < w {
        return Err(Error::InvalidInput(format!(
            "contours of length {} and {} are shorter than the window {w}",
            pred.len(),
            reference.len()
        )));
    }
    let a: Vec<&[f64]> = pred.windows(w).collect();
    let b: Vec<&[f64]> = reference.windows(w).collect();
    let (n, m) = (a.len(), b.len());
    let cost = |i: usize, j: usize| pearson(a[i], b[j]).map_or(cfg.zero_variance_cost, |r| 1.0 - r);
    // (accumulated cost, path length); ties prefer the shorter path.
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost(i, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
                    if i >= di && j >= dj {
                        let cand = acc[(i - di) * m + (j - dj)];
                        if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                            best = cand;
                        }
                    }
                }
                best
            };
            acc[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    let (total, len) = acc[n * m - 1];
    Ok(total / len as f64)
}
