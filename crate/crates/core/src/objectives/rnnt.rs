//! Transducer loss by forward-backward over the `T x (U+1)` lattice.
//!
//! Alignments start at `(0, 0)`; a blank advances `t`, label `u+1` advances
//! `u`, and every path ends with a blank emitted at `(T-1, U)`.

use super::{log_add, log_softmax_row};
use crate::{Error, Result};

pub const BLANK: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnntLattice {
    pub frames: usize,
    pub labels: usize,
    pub vocab: usize,
}

impl RnntLattice {
    pub fn logits_len(&self) -> usize {
        self.frames * (self.labels + 1) * self.vocab
    }

    fn idx(&self, t: usize, u: usize) -> usize {
        (t * (self.labels + 1) + u) * self.vocab
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    /// Negative log-likelihood.
    pub loss: f64,
    /// d loss / d logits, laid out like the input.
    pub grad: Vec<f64>,
}

/// `logits` is `[T, U+1, V]` row-major (unnormalized). Blank is id 0.
pub fn rnnt_loss(logits: &[f64], lat: RnntLattice, labels: &[u32]) -> Result<LossAndGrad> {
    let RnntLattice {
        frames: t_len,
        labels: u_len,
        vocab,
    } = lat;
    if t_len == 0 {
        return Err(Error::InvalidInput("transducer loss needs T >= 1".into()));
    }
    if vocab < 2 {
        return Err(Error::InvalidInput("vocabulary must include blank and one label".into()));
    }
    if labels.len() != u_len {
        return Err(Error::Shape(format!(
            "{} labels for a lattice with U = {u_len}",
            labels.len()
        )));
    }
    if logits.len() != lat.logits_len() {
        return Err(Error::Shape(format!(
            "expected {} logits, got {}",
            lat.logits_len(),
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l as usize >= vocab) {
        return Err(Error::InvalidInput(format!("label {bad} outside [1, {})", vocab)));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite transducer logits".into()));
    }

    let mut lp = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks_exact(vocab).zip(lp.chunks_exact_mut(vocab)) {
        log_softmax_row(src, dst);
    }
    let blank = |t: usize, u: usize| lp[lat.idx(t, u) + BLANK as usize];
    let emit = |t: usize, u: usize| lp[lat.idx(t, u) + labels[u] as usize];
    let cols = u_len + 1;

    let mut alpha = vec![f64::NEG_INFINITY; t_len * cols];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..cols {
            if t == 0 && u == 0 {
                continue;
            }
            let from_t = if t > 0 {
                alpha[(t - 1) * cols + u] + blank(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let from_u = if u > 0 {
                alpha[t * cols + u - 1] + emit(t, u - 1)
            } else {
                f64::NEG_INFINITY
            };
            alpha[t * cols + u] = log_add(from_t, from_u);
        }
    }
    let log_p = alpha[(t_len - 1) * cols + u_len] + blank(t_len - 1, u_len);

    let mut beta = vec![f64::NEG_INFINITY; t_len * cols];
    beta[(t_len - 1) * cols + u_len] = blank(t_len - 1, u_len);
    for t in (0..t_len).rev() {
        for u in (0..cols).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let via_blank = if t + 1 < t_len {
                beta[(t + 1) * cols + u] + blank(t, u)
            } else {
                f64::NEG_INFINITY
            };
            let via_label = if u < u_len {
                beta[t * cols + u + 1] + emit(t, u)
            } else {
                f64::NEG_INFINITY
            };
            beta[t * cols + u] = log_add(via_blank, via_label);
        }
    }

    let mut grad = vec![0.0; logits.len()];
    for t in 0..t_len {
        for u in 0..cols {
            let a = alpha[t * cols + u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let base = lat.idx(t, u);
            // Occupancy of each outgoing edge, as d(-log P)/d lp.
            let mut g_blank = 0.0;
            if t + 1 < t_len {
                g_blank = -(a + blank(t, u) + beta[(t + 1) * cols + u] - log_p).exp();
            } else if u == u_len {
                g_blank = -(a + blank(t, u) - log_p).exp();
            }
            let mut g_label = 0.0;
            if u < u_len {
                g_label = -(a + emit(t, u) + beta[t * cols + u + 1] - log_p).exp();
            }
            let total = g_blank + g_label;
            for k in 0..vocab {
                grad[base + k] = -lp[base + k].exp() * total;
            }
            grad[base + BLANK as usize] += g_blank;
            if u < u_len {
                grad[base + labels[u] as usize] += g_label;
            }
        }
    }
    Ok(LossAndGrad { loss: -log_p, grad })
}
