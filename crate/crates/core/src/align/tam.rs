use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamConfig {
    pub upsample_factor: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl TamConfig {
    /// Factor from a target frame rate and the decoder rate; must be a
    /// positive integer.
    pub fn from_rates(target_rate: f64, decoder_rate: f64, d_in: usize, d_out: usize) -> Result<Self> {
        let ratio = target_rate / decoder_rate;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "target rate {target_rate} is not an integer multiple of decoder rate {decoder_rate}"
            )));
        }
        let cfg = Self {
            upsample_factor: ratio.round() as usize,
            d_in,
            d_out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_factor == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::InvalidArgument(format!("invalid TAM config {self:?}")));
        }
        Ok(())
    }
}

/// Linear map of each `h_i` to `factor` target-rate rows.
#[derive(Debug, Clone)]
pub struct Tam {
    config: TamConfig,
    proj: Linear,
}

impl Tam {
    pub fn new(ps: &mut ParamStore, name: &str, config: TamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            proj: Linear::new(ps, name, config.d_in, config.upsample_factor * config.d_out)?,
        })
    }

    pub fn config(&self) -> &TamConfig {
        &self.config
    }

    /// `[T, d_in]` -> `[T * factor, d_out]`; row `factor * i + j` depends on
    /// `h_i` only.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let (t, _) = h.dims2()?;
        Ok(self
            .proj
            .forward(h)?
            .reshape((t * self.config.upsample_factor, self.config.d_out))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn h(t: usize, phase: f64) -> Tensor {
        let v: Vec<f64> = (0..t * 6).map(|i| (i as f64 * 0.41 + phase).sin()).collect();
        Tensor::from_vec(v, (t, 6), &Device::Cpu).unwrap()
    }

    #[test]
    fn rate_closure() {
        let cfg = TamConfig::from_rates(25.0, 50.0 / 8.0, 16, 32).unwrap();
        assert_eq!(cfg.upsample_factor, 4);
        let cfg = TamConfig::from_rates(50.0, 50.0 / 8.0, 16, 80).unwrap();
        assert_eq!(cfg.upsample_factor, 8);
        assert!(TamConfig::from_rates(30.0, 50.0 / 8.0, 16, 32).is_err());
        assert!(TamConfig { upsample_factor: 0, d_in: 1, d_out: 1 }.validate().is_err());
    }

    #[test]
    fn output_length_is_t_times_factor() {
        let mut ps = ParamStore::new(1, DType::F64);
        let tam = Tam::new(&mut ps, "tam", TamConfig { upsample_factor: 4, d_in: 6, d_out: 3 }).unwrap();
        assert_eq!(tam.forward(&h(7, 0.0)).unwrap().dims(), &[28, 3]);
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let mut ps = ParamStore::new(1, DType::F64);
        let tam = Tam::new(&mut ps, "tam", TamConfig { upsample_factor: 2, d_in: 6, d_out: 3 }).unwrap();
        let w = ps.get("tam.weight").unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let b = ps.get("tam.bias").unwrap();
        b.set(&Tensor::new(&[1.0f64, 2., 3., 4., 5., 6.], &Device::Cpu).unwrap()).unwrap();
        let out = tam.forward(&h(3, 0.0)).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..3 {
            assert_eq!(out[2 * i], vec![1.0, 2., 3.]);
            assert_eq!(out[2 * i + 1], vec![4.0, 5., 6.]);
        }
    }

    #[test]
    fn changing_h_i_touches_only_its_rows() {
        let mut ps = ParamStore::new(2, DType::F64);
        let tam = Tam::new(&mut ps, "tam", TamConfig { upsample_factor: 4, d_in: 6, d_out: 3 }).unwrap();
        let base = h(5, 0.0);
        let mut vals = base.to_vec2::<f64>().unwrap();
        vals[2].iter_mut().for_each(|v| *v += 1.0);
        let changed = Tensor::new(vals, &Device::Cpu).unwrap();
        let a = tam.forward(&base).unwrap().to_vec2::<f64>().unwrap();
        let b = tam.forward(&changed).unwrap().to_vec2::<f64>().unwrap();
        for r in 0..20 {
            assert_eq!(a[r] == b[r], !(8..12).contains(&r), "row {r}");
        }
    }
}
