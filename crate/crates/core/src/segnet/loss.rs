use candle_core::{DType, Device, Tensor};

use super::{NUM_CLASSES, UNLABELED};
use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

/// Class-weighted cross-entropy over labeled pixels only:
/// `Σ w_{y_i} · (−log p_i(y_i)) / Σ w_{y_i}`.
///
/// `logits` is `(B, C, H, W)`; `labels` holds `B·H·W` values in batch, row,
/// column order. UNLABELED pixels are dropped before any arithmetic, so
/// their scores cannot influence the result. A batch whose labeled pixels
/// all carry zero weight yields a zero loss with zero gradients.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[u8], weights: &[f64; NUM_CLASSES]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != NUM_CLASSES || labels.len() != b * h * w {
        return Err(Error::Contract(format!(
            "logits {:?} do not match {} labels",
            logits.dims(),
            labels.len()
        )));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut row_w = Vec::new();
    let mut total_w = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y == UNLABELED {
            continue;
        }
        if y as usize >= NUM_CLASSES {
            return Err(Error::Contract(format!("label {y} out of range")));
        }
        rows.push(i as u32);
        targets.push(y as u32);
        row_w.push(weights[y as usize]);
        total_w += weights[y as usize];
    }
    if total_w == 0.0 {
        return Ok((logits.sum_all()? * 0.0)?);
    }
    let dev = Device::Cpu;
    let m = rows.len();
    let flat = logits.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
    let picked = flat.index_select(&Tensor::from_vec(rows, m, &dev)?, 0)?;
    let logp = log_softmax_last(&picked)?;
    let nll = logp
        .gather(&Tensor::from_vec(targets, (m, 1), &dev)?, 1)?
        .squeeze(1)?
        .neg()?;
    let wt = Tensor::from_vec(row_w, m, &dev)?.to_dtype(logits.dtype())?;
    Ok(((nll * wt)?.sum_all()? / total_w)?)
}

/// Loss value as `f64`.
pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
