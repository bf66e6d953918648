//! CTC loss (blank = 0) and greedy CTC decoding.

use super::rnnt::{LossAndGrad, BLANK};
use super::{log_add, log_softmax_row};
use crate::{Error, Result};

/// Minimum number of frames able to emit `labels` (repeats need a blank between).
pub fn min_frames(labels: &[u32]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `logits` is `[T, V]` row-major (unnormalized).
pub fn ctc_loss(logits: &[f64], frames: usize, vocab: usize, labels: &[u32]) -> Result<LossAndGrad> {
    if vocab < 2 {
        return Err(Error::InvalidInput("vocabulary must include blank and one label".into()));
    }
    if logits.len() != frames * vocab {
        return Err(Error::Shape(format!(
            "expected {} logits, got {}",
            frames * vocab,
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l as usize >= vocab) {
        return Err(Error::InvalidInput(format!("label {bad} outside [1, {vocab})")));
    }
    if frames == 0 || frames < min_frames(labels) {
        return Err(Error::InvalidInput(format!(
            "{} labels need at least {} frames, got {frames}",
            labels.len(),
            min_frames(labels).max(1)
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite CTC logits".into()));
    }
    let mut lp = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks_exact(vocab).zip(lp.chunks_exact_mut(vocab)) {
        log_softmax_row(src, dst);
    }
    // Extended sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<u32> = std::iter::once(BLANK)
        .chain(labels.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let y = |t: usize, s: usize| lp[t * vocab + ext[s] as usize];
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = y(0, 0);
    if s_len > 1 {
        alpha[1] = y(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + y(t, s);
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    beta[last + s_len - 1] = y(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = y(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = acc + y(t, s);
        }
    }

    let mut grad = vec![0.0; logits.len()];
    for t in 0..frames {
        // occupancy per vocabulary entry: sum over extended positions
        let mut occ = vec![0.0; vocab];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            occ[ext[s] as usize] += (a + b - y(t, s) - log_p).exp();
        }
        let total: f64 = occ.iter().sum();
        for k in 0..vocab {
            grad[t * vocab + k] = lp[t * vocab + k].exp() * total - occ[k];
        }
    }
    Ok(LossAndGrad { loss: -log_p, grad })
}

/// Argmax per frame, merge repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &[f32], vocab: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in logits.chunks_exact(vocab) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0 as u32;
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}
