use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Alignment loss with the count of rows skipped for zero norm.
#[derive(Debug, Clone)]
pub struct AlignLoss {
    pub loss: Tensor,
    pub rows: usize,
    pub skipped: usize,
}

/// Mean over masked-in rows of `1 - cos(projected_r, target_r)`.
///
/// `projected, target: [R, D]`, `mask` of length `R`. Rows where either side
/// has zero norm are skipped and counted. With no usable rows the loss is 0.
pub fn cosine_rows_loss(projected: &Tensor, target: &Tensor, mask: &[bool]) -> Result<AlignLoss> {
    if projected.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.dims()),
            actual: format!("{:?}", projected.dims()),
        });
    }
    let (r, _) = projected.dims2()?;
    if mask.len() != r {
        return Err(Error::LengthMismatch(format!("{} mask entries for {r} rows", mask.len())));
    }
    let target = target.detach();
    let pn = projected.sqr()?.sum(D::Minus1)?.sqrt()?;
    let tn = target.sqr()?.sum(D::Minus1)?.sqrt()?;
    let pn_vals = pn.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let tn_vals = tn.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let mut skipped = 0;
    let mut weights = vec![0f64; r];
    let mut guard = vec![0f64; r];
    for i in 0..r {
        if !mask[i] {
            guard[i] = 1.0;
            continue;
        }
        if pn_vals[i] == 0.0 || tn_vals[i] == 0.0 {
            skipped += 1;
            guard[i] = 1.0;
            continue;
        }
        weights[i] = 1.0;
    }
    let used = weights.iter().filter(|&&w| w > 0.0).count();
    let dev = projected.device();
    let dtype = projected.dtype();
    if used == 0 {
        return Ok(AlignLoss {
            loss: Tensor::zeros((), dtype, dev)?,
            rows: 0,
            skipped,
        });
    }
    let w = Tensor::from_vec(weights, r, dev)?.to_dtype(dtype)?;
    let guard = Tensor::from_vec(guard, r, dev)?.to_dtype(dtype)?;
    // guarded rows get a unit denominator; their weight is zero anyway
    let denom = pn.mul(&tn)?.add(&guard)?;
    let cos = projected.mul(&target)?.sum(D::Minus1)?.div(&denom)?;
    let loss = (cos.affine(-1.0, 1.0)?.mul(&w)?.sum_all()? / used as f64)?;
    Ok(AlignLoss {
        loss,
        rows: used,
        skipped,
    })
}

/// Truncates both sides to the shorter length, allowing a mismatch of at
/// most `tolerance` rows.
fn truncate_pair(projected: &Tensor, target: &Tensor, tolerance: usize) -> Result<(Tensor, Tensor)> {
    let (rp, dp) = projected.dims2()?;
    let (rt, dt) = target.dims2()?;
    if dp != dt {
        return Err(Error::ShapeMismatch {
            expected: format!("width {dt}"),
            actual: format!("width {dp}"),
        });
    }
    if rp.abs_diff(rt) > tolerance {
        return Err(Error::LengthMismatch(format!(
            "{rp} projected rows against {rt} target rows exceeds tolerance {tolerance}"
        )));
    }
    let r = rp.min(rt);
    Ok((projected.narrow(0, 0, r)?, target.narrow(0, 0, r)?))
}

/// Cosine alignment of TAM output to the semantic target of one utterance.
/// `tolerance` is normally the TAM factor.
pub fn align_loss(projected: &Tensor, target: &Tensor, tolerance: usize) -> Result<AlignLoss> {
    let (p, t) = truncate_pair(projected, target, tolerance)?;
    let mask = vec![true; p.dim(0)?];
    cosine_rows_loss(&p, &t, &mask)
}

/// The same objective with the TTS mel frames as the target.
pub fn mel_target_loss(projected: &Tensor, mel_frames: &Tensor, tolerance: usize) -> Result<AlignLoss> {
    align_loss(projected, mel_frames, tolerance)
}
