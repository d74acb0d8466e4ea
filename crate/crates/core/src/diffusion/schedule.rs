use std::f64::consts::FRAC_PI_2;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(alpha_t, sigma_t) = (cos(pi t / 2), sin(pi t / 2))`.
pub fn vp_schedule(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("diffusion time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok((1.0, 0.0));
    }
    if t == 1.0 {
        return Ok((0.0, 1.0));
    }
    let a = FRAC_PI_2 * t;
    Ok((a.cos(), a.sin()))
}

/// A noisy chunk at time `t`.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub t: f64,
    pub alpha_t: f64,
    pub sigma_t: f64,
    pub x_t: Tensor,
}

impl DiffusionState {
    pub fn new(t: f64, x_t: Tensor) -> Result<Self> {
        let (alpha_t, sigma_t) = vp_schedule(t)?;
        Ok(Self {
            t,
            alpha_t,
            sigma_t,
            x_t,
        })
    }
}

/// `alpha_t x0 + sigma_t eps`.
pub fn forward_diffuse(x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x0.dims()),
            actual: format!("{:?}", eps.dims()),
        });
    }
    let (a, s) = vp_schedule(t)?;
    if s == 0.0 {
        return Ok(x0.clone());
    }
    if a == 0.0 {
        return Ok(eps.clone());
    }
    Ok(((x0 * a)? + (eps * s)?)?)
}

/// Per-chunk times: `x0, eps: [c, N, D]`, `t` of length `c`.
pub fn forward_diffuse_batch(x0: &Tensor, t: &[f64], eps: &Tensor) -> Result<Tensor> {
    if x0.dims() != eps.dims() || x0.dim(0)? != t.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} with {} times", x0.dims(), x0.dim(0)?),
            actual: format!("{:?} with {} times", eps.dims(), t.len()),
        });
    }
    let (alpha, sigma): (Vec<f64>, Vec<f64>) = t
        .iter()
        .map(|&t| vp_schedule(t))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let shape = (t.len(), 1, 1);
    let a = Tensor::from_vec(alpha, shape, x0.device())?.to_dtype(x0.dtype())?;
    let s = Tensor::from_vec(sigma, shape, x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub cfg_alpha: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 10,
            cfg_alpha: 0.7,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::InvalidArgument("nfe must be >= 1".into()));
        }
        if !(self.cfg_alpha >= 0.0 && self.cfg_alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance weight {} must be finite and >= 0",
                self.cfg_alpha
            )));
        }
        Ok(())
    }

    /// Uniform grid `1 = t_0 > t_1 > ... > t_nfe = 0`.
    pub fn timestep_grid(&self) -> Vec<f64> {
        let n = self.nfe;
        (0..=n)
            .map(|k| if k == n { 0.0 } else { 1.0 - k as f64 / n as f64 })
            .collect()
    }
}

/// One deterministic DDIM step written in terms of the clean estimate:
/// `eps = (x_t - alpha_t x0) / sigma_t`, then `alpha_next x0 + sigma_next eps`.
pub fn ddim_step(x_t: &Tensor, x0_hat: &Tensor, t: f64, t_next: f64) -> Result<Tensor> {
    if t <= t_next {
        return Err(Error::InvalidArgument(format!(
            "DDIM step must decrease time, got {t} -> {t_next}"
        )));
    }
    let (a, s) = vp_schedule(t)?;
    let (a_next, s_next) = vp_schedule(t_next)?;
    if s == 0.0 {
        return Err(Error::InvalidArgument("cannot recover noise at sigma_t = 0".into()));
    }
    if s_next == 0.0 {
        return Ok(x0_hat.clone());
    }
    let eps = ((x_t - (x0_hat * a)?)? / s)?;
    Ok(((x0_hat * a_next)? + (eps * s_next)?)?)
}

/// Standard-normal noise for chunk `chunk_index` of a session seeded with
/// `seed`; independent of batching and of how many chunks precede it.
pub fn chunk_noise(seed: u64, chunk_index: usize, len: usize) -> Vec<f32> {
    let stream = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(chunk_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    rng.set_stream(chunk_index as u64);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}
