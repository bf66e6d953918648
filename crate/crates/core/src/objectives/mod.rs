//! Training losses and input augmentations.

pub mod brq;
pub mod ce;
pub mod ctc;
pub mod rnnt;
pub mod specaug;

use candle_core::Tensor;

pub use brq::{apply_span_mask, brq_codes, sample_span_mask, RandomQuantizer, SpanMask};
pub use ce::{brq_loss, distill_loss, masked_cross_entropy};
pub use ctc::{ctc_greedy_decode, ctc_loss};
pub use rnnt::{rnnt_loss, LossAndGrad, RnntLattice, BLANK};
pub use specaug::{specaug, SpecAugConfig};

use crate::{Error, Result};

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = src.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s - z;
    }
}

/// A loss computed outside the graph, attached through a linear surrogate.
///
/// `surrogate = sum(logits * grad)` has exactly `grad` as its gradient with
/// respect to `logits`; `value` carries the true loss for logging.
#[derive(Debug, Clone)]
pub struct ExternalLoss {
    pub surrogate: Tensor,
    pub value: f64,
}

fn attach(logits: &Tensor, out: LossAndGrad, scale: f64) -> Result<ExternalLoss> {
    let grad: Vec<f32> = out.grad.iter().map(|g| (g * scale) as f32).collect();
    let g = Tensor::from_vec(grad, logits.shape(), logits.device())?.to_dtype(logits.dtype())?;
    let surrogate = (logits * g)?.sum_all()?;
    Ok(ExternalLoss {
        surrogate,
        value: out.loss * scale,
    })
}

fn to_f64(logits: &Tensor) -> Result<Vec<f64>> {
    let v = logits
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite loss logits".into()));
    }
    Ok(v)
}

/// Transducer loss on a `[T, U+1, V]` logits tensor, scaled by `scale`.
pub fn rnnt_loss_tensor(logits: &Tensor, labels: &[u32], scale: f64) -> Result<ExternalLoss> {
    let (t, u1, v) = logits.dims3()?;
    let lat = RnntLattice {
        frames: t,
        labels: u1 - 1,
        vocab: v,
    };
    let out = rnnt_loss(&to_f64(logits)?, lat, labels)?;
    attach(logits, out, scale)
}

/// CTC loss on a `[T, V]` logits tensor, scaled by `scale`.
pub fn ctc_loss_tensor(logits: &Tensor, labels: &[u32], scale: f64) -> Result<ExternalLoss> {
    let (t, v) = logits.dims2()?;
    let out = ctc_loss(&to_f64(logits)?, t, v, labels)?;
    attach(logits, out, scale)
}
