use candle_core::Tensor;

use super::dit::{ConditionSet, Dit};
use super::schedule::{ddim_step, SamplerConfig};
use crate::error::{Error, Result};

/// `(1 + alpha) DiT(psi) - alpha DiT(null)` from two separate calls that
/// share `prev`, `noisy` and `t`.
pub fn cfg_predict(dit: &Dit, cond: &ConditionSet, prev: &Tensor, noisy: &Tensor, t: &Tensor, cfg_alpha: f64) -> Result<Tensor> {
    if !(cfg_alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance weight {cfg_alpha} must be >= 0")));
    }
    let conditional = dit.forward(cond, prev, noisy, t)?;
    let unconditional = dit.forward(&cond.to_null(), prev, noisy, t)?;
    Ok(((conditional * (1.0 + cfg_alpha))? - (unconditional * cfg_alpha)?)?)
}

/// Runs guided DDIM from `x_1 = noise` down to `t = 0` for a batch of
/// chunks; `noise: [c, N, D_mel]`.
pub fn sample_chunk(dit: &Dit, cond: &ConditionSet, prev: &Tensor, noise: &Tensor, sampler: &SamplerConfig) -> Result<Tensor> {
    sampler.validate()?;
    let grid = sampler.timestep_grid();
    let c = noise.dim(0)?;
    let mut x = noise.clone();
    for w in grid.windows(2) {
        let t = Tensor::full(w[0], c, noise.device())?.to_dtype(noise.dtype())?;
        let x0 = cfg_predict(dit, cond, prev, &x, &t, sampler.cfg_alpha)?;
        x = ddim_step(&x, &x0, w[0], w[1])?;
    }
    Ok(x)
}
