//! Cross-entropy losses on `[N, K]` logits tensors.

use candle_core::{DType, Tensor};

use crate::nn::log_softmax;
use crate::{Error, Result};

/// `sum_i w_i * CE(logits_i, target_i) / sum_i w_i`.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[u32], weights: &[f32]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows, {} targets, {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c as usize >= k) {
        return Err(Error::InvalidInput(format!("target {bad} outside [0, {k})")));
    }
    let total: f32 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("no positions carry loss weight".into()));
    }
    let dev = logits.device();
    let idx = Tensor::from_vec(targets.to_vec(), (n, 1), dev)?;
    // Reduce in f64 so large-K losses keep full precision.
    let wide = logits.to_dtype(DType::F64)?;
    let picked = log_softmax(&wide)?.gather(&idx, 1)?.squeeze(1)?;
    let w = Tensor::from_vec(weights.iter().map(|&v| v as f64).collect::<Vec<_>>(), n, dev)?;
    let loss = ((picked * w)?.sum_all()?.neg()? / total as f64)?;
    Ok(loss.to_dtype(logits.dtype())?)
}

/// Mean CE over masked positions only; errors when nothing is masked.
pub fn brq_loss(student_logits: &Tensor, codes: &[u32], masked: &[bool]) -> Result<Tensor> {
    if !masked.iter().any(|&m| m) {
        return Err(Error::InvalidInput("no masked positions".into()));
    }
    let w: Vec<f32> = masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    masked_cross_entropy(student_logits, codes, &w)
}

/// Mean CE over every frame.
pub fn distill_loss(student_logits: &Tensor, teacher_codes: &[u32]) -> Result<Tensor> {
    masked_cross_entropy(student_logits, teacher_codes, &vec![1.0; teacher_codes.len()])
}

/// Rows of `[B, T, K]` at the valid (unpadded) frames, flattened to `[N, K]`.
pub fn valid_rows(logits: &Tensor, lens: &[usize]) -> Result<Tensor> {
    let (b, t, _) = logits.dims3()?;
    if lens.len() != b || lens.iter().any(|&l| l > t) {
        return Err(Error::Shape(format!("lengths {lens:?} do not fit [{b}, {t}]")));
    }
    let idx: Vec<u32> = lens
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| (0..l).map(move |j| (i * t + j) as u32))
        .collect();
    let n = idx.len();
    let flat = logits.flatten_to(1)?;
    Ok(flat.index_select(&Tensor::from_vec(idx, n, logits.device())?, 0)?)
}
