use candle_core::Tensor;

use crate::error::{Error, Result};

/// Squared error averaged over the valid values of each chunk, then over
/// chunks. `pred, target: [c, N, D]`; `valid_frames[i] <= N`.
pub fn diffusion_loss(pred: &Tensor, target: &Tensor, valid_frames: &[usize]) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.dims()),
            actual: format!("{:?}", pred.dims()),
        });
    }
    let (c, n, d) = pred.dims3()?;
    if valid_frames.len() != c {
        return Err(Error::LengthMismatch(format!(
            "{} valid-frame counts for {c} chunks",
            valid_frames.len()
        )));
    }
    if c == 0 {
        return Err(Error::EmptyInput("diffusion loss batch"));
    }
    let mask: Vec<f64> = valid_frames
        .iter()
        .flat_map(|&v| {
            let w = if v == 0 { 0.0 } else { 1.0 / (v * d) as f64 };
            (0..n).map(move |f| if f < v { w } else { 0.0 })
        })
        .collect();
    let mask = Tensor::from_vec(mask, (c, n, 1), pred.device())?.to_dtype(pred.dtype())?;
    let sq = (pred - target)?.sqr()?.broadcast_mul(&mask)?;
    Ok((sq.sum_all()? / c as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn zero_for_perfect_prediction() {
        let x = Tensor::ones((2, 8, 80), DType::F64, &Device::Cpu).unwrap();
        let l = diffusion_loss(&x, &x, &[8, 8]).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn unit_offset_costs_one() {
        let x = Tensor::zeros((3, 8, 80), DType::F64, &Device::Cpu).unwrap();
        let y = (&x + 1.0).unwrap();
        let l = diffusion_loss(&y, &x, &[8, 8, 8]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        // padded frames do not count
        let l = diffusion_loss(&y, &x, &[8, 8, 2]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_per_chunk_mean() {
        let vals: Vec<f64> = (0..2 * 4 * 3).map(|i| ((i * 7 % 11) as f64) * 0.1).collect();
        let p = Tensor::from_vec(vals.clone(), (2, 4, 3), &Device::Cpu).unwrap();
        let t = Tensor::zeros((2, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let valid = [4, 1];
        let first: f64 = vals[..12].iter().map(|v| v * v).sum::<f64>() / 12.0;
        let second: f64 = vals[12..15].iter().map(|v| v * v).sum::<f64>() / 3.0;
        let l = diffusion_loss(&p, &t, &valid).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - (first + second) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatches_are_errors() {
        let x = Tensor::zeros((1, 8, 80), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 8, 81), DType::F64, &Device::Cpu).unwrap();
        assert!(diffusion_loss(&x, &y, &[8]).is_err());
        assert!(diffusion_loss(&x, &x, &[8, 8]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 2 * 3 * 4;
        let p0: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        let target = Tensor::from_vec((0..n).map(|i| (i as f64 * 0.3).cos()).collect::<Vec<_>>(), (2, 3, 4), &Device::Cpu).unwrap();
        let valid = [3, 2];
        let var = Var::from_vec(p0.clone(), (2, 3, 4), &Device::Cpu).unwrap();
        let g = diffusion_loss(var.as_tensor(), &target, &valid)
            .unwrap()
            .backward()
            .unwrap()
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let f = |v: &[f64]| {
            let t = Tensor::from_slice(v, (2, 3, 4), &Device::Cpu).unwrap();
            diffusion_loss(&t, &target, &valid).unwrap().to_scalar::<f64>().unwrap()
        };
        let h = 1e-6;
        for i in 0..n {
            let mut up = p0.clone();
            let mut dn = p0.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }
}
