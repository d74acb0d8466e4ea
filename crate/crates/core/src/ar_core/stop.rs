use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::softplus;

const PROB_CLAMP: f64 = 1e-7;

fn check_lengths(a: &Tensor, labels: &Tensor) -> Result<()> {
    if a.dims() != labels.dims() {
        return Err(Error::LengthMismatch(format!(
            "{} stop predictions for {} labels",
            a.elem_count(),
            labels.elem_count()
        )));
    }
    if a.elem_count() == 0 {
        return Err(Error::EmptyInput("stop predictions"));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities against `{0, 1}` labels;
/// probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn stop_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check_lengths(probs, labels)?;
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pos = labels.mul(&p.log()?)?;
    let neg = labels.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok(pos.add(&neg)?.mean_all()?.neg()?)
}

/// The same loss from logits: `softplus(x) - y x`, stable for large `|x|`.
pub fn stop_loss_from_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check_lengths(logits, labels)?;
    Ok(softplus(logits)?.sub(&labels.mul(logits)?)?.mean_all()?)
}
