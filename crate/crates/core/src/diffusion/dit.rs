use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct DitDims {
    pub n_mels: usize,
    pub chunk_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub d_spk: usize,
    pub d_utt: usize,
}

impl DitDims {
    pub fn d_cond(&self) -> usize {
        self.d_h + self.d_spk + self.d_utt
    }
}

/// Conditions for a batch of `c` chunks: `[h_{i-1}, h_i]`, speaker and
/// utterance embeddings, and which rows take the unconditional branch.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub h_prev: Tensor,
    pub h_cur: Tensor,
    pub v: Tensor,
    pub u: Tensor,
    pub null: Vec<bool>,
}

impl ConditionSet {
    pub fn new(h_prev: Tensor, h_cur: Tensor, v: Tensor, u: Tensor) -> Result<Self> {
        let c = h_cur.dim(0)?;
        for (name, t) in [("h_prev", &h_prev), ("v", &v), ("u", &u)] {
            if t.dim(0)? != c {
                return Err(Error::ShapeMismatch {
                    expected: format!("{c} rows of {name}"),
                    actual: format!("{}", t.dim(0)?),
                });
            }
        }
        Ok(Self {
            h_prev,
            h_cur,
            v,
            u,
            null: vec![false; c],
        })
    }

    pub fn len(&self) -> usize {
        self.null.len()
    }

    pub fn is_empty(&self) -> bool {
        self.null.is_empty()
    }

    /// The same content with every row on the unconditional branch.
    pub fn to_null(&self) -> Self {
        Self {
            null: vec![true; self.len()],
            ..self.clone()
        }
    }

    pub fn with_null(mut self, null: Vec<bool>) -> Result<Self> {
        if null.len() != self.len() {
            return Err(Error::LengthMismatch(format!(
                "{} null flags for {} conditions",
                null.len(),
                self.len()
            )));
        }
        self.null = null;
        Ok(self)
    }
}

/// Per-frame condition rows `[c, 2N, d_h + d_spk + d_utt]`: `h_{i-1}` over
/// the prefix frames, `h_i` over the target frames, `v` and `u` everywhere.
pub fn upsample_conditions(h_prev: &Tensor, h_cur: &Tensor, v: &Tensor, u: &Tensor, n: usize) -> Result<Tensor> {
    let (c, d_h) = h_cur.dims2()?;
    let rep = |x: &Tensor, k: usize| -> Result<Tensor> {
        let d = x.dim(1)?;
        Ok(x.unsqueeze(1)?.broadcast_as((c, k, d))?)
    };
    let h = Tensor::cat(&[rep(h_prev, n)?, rep(h_cur, n)?], 1)?;
    debug_assert_eq!(h.dims(), &[c, 2 * n, d_h]);
    Ok(Tensor::cat(&[h, rep(v, 2 * n)?, rep(u, 2 * n)?], 2)?)
}

struct DitBlock {
    attn: MultiHeadAttention,
    mlp: Mlp,
    modulation: Linear,
}

/// Transformer denoiser over `[clean previous chunk ; noisy chunk]` that
/// predicts the clean chunk. Conditions enter twice: added per frame after
/// upsampling, and as adaptive layer-norm shift / scale / gate from the
/// pooled condition plus the timestep embedding.
pub struct Dit {
    dims: DitDims,
    input: Linear,
    frame_pos: Tensor,
    cond_proj: Linear,
    time_mlp1: Linear,
    time_mlp2: Linear,
    blocks: Vec<DitBlock>,
    final_modulation: Linear,
    output: Linear,
    norm: LayerNorm,
    null_h: Tensor,
    null_v: Tensor,
    null_u: Tensor,
    start_h: Tensor,
    start_chunk: Tensor,
    dtype: DType,
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(x)?)?)
}

/// `x (1 + scale) + shift` with `[c, W]` modulation broadcast over frames.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x
        .broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?
        .broadcast_add(&shift.unsqueeze(1)?)?)
}

impl Dit {
    pub fn new(ps: &mut ParamStore, dims: DitDims) -> Result<Self> {
        let w = dims.width;
        let blocks = (0..dims.layers)
            .map(|i| {
                let name = format!("dit.block{i}");
                Ok(DitBlock {
                    attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), w, dims.heads)?,
                    mlp: Mlp::new(ps, &format!("{name}.mlp"), w, 4 * w)?,
                    modulation: Linear::zeros(ps, &format!("{name}.modulation"), w, 6 * w)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            input: Linear::new(ps, "dit.input", dims.n_mels, w)?,
            frame_pos: ps.param("dit.frame_pos", &[2 * dims.chunk_size, w], Init::Normal(0.02))?,
            cond_proj: Linear::new(ps, "dit.cond_proj", dims.d_cond(), w)?,
            time_mlp1: Linear::new(ps, "dit.time1", w, w)?,
            time_mlp2: Linear::new(ps, "dit.time2", w, w)?,
            blocks,
            final_modulation: Linear::zeros(ps, "dit.final_modulation", w, 2 * w)?,
            output: Linear::with_init(ps, "dit.output", w, dims.n_mels, Init::Normal(0.02), true)?,
            norm: LayerNorm::plain(),
            null_h: ps.param("dit.null_h", &[dims.d_h], Init::Normal(0.02))?,
            null_v: ps.param("dit.null_v", &[dims.d_spk], Init::Normal(0.02))?,
            null_u: ps.param("dit.null_u", &[dims.d_utt], Init::Normal(0.02))?,
            start_h: ps.param("dit.start_h", &[dims.d_h], Init::Normal(0.02))?,
            start_chunk: ps.param("dit.start_chunk", &[dims.chunk_size, dims.n_mels], Init::Zeros)?,
            dtype: ps.dtype(),
        })
    }

    pub fn dims(&self) -> &DitDims {
        &self.dims
    }

    /// Learned stand-in for `h_{-1}`, `[d_h]`.
    pub fn start_h(&self) -> &Tensor {
        &self.start_h
    }

    /// Learned stand-in for the clean chunk before chunk 0, `[N, D_mel]`.
    pub fn start_chunk(&self) -> &Tensor {
        &self.start_chunk
    }

    /// Sinusoidal features of `t: [c]` -> `[c, W]`.
    fn timestep_features(&self, t: &Tensor) -> Result<Tensor> {
        let half = self.dims.width / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(1000f64.ln()) * k as f64 / half as f64).exp() * 1000.0)
            .collect();
        let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(self.dtype)?;
        let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
        let mut feats = Tensor::cat(&[args.sin()?, args.cos()?], 1)?;
        if self.dims.width % 2 == 1 {
            let pad = Tensor::zeros((t.dim(0)?, 1), self.dtype, t.device())?;
            feats = Tensor::cat(&[feats, pad], 1)?;
        }
        Ok(feats)
    }

    fn select_null(&self, x: &Tensor, null: &Tensor, value: &Tensor) -> Result<Tensor> {
        let keep = null.affine(-1.0, 1.0)?;
        Ok(x.broadcast_mul(&keep)?.add(&null.broadcast_mul(&value.unsqueeze(0)?)?)?)
    }

    /// Predicts the clean chunk: `prev, noisy: [c, N, D_mel]`, `t: [c]`.
    /// Returns only the last `N` frames.
    pub fn forward(&self, cond: &ConditionSet, prev: &Tensor, noisy: &Tensor, t: &Tensor) -> Result<Tensor> {
        let (c, n, d) = noisy.dims3()?;
        if prev.dims() != noisy.dims() || n != self.dims.chunk_size || d != self.dims.n_mels {
            return Err(Error::ShapeMismatch {
                expected: format!("[c, {}, {}] twice", self.dims.chunk_size, self.dims.n_mels),
                actual: format!("{:?} and {:?}", prev.dims(), noisy.dims()),
            });
        }
        if cond.len() != c || t.dims() != [c] {
            return Err(Error::ShapeMismatch {
                expected: format!("{c} conditions and times"),
                actual: format!("{} and {:?}", cond.len(), t.dims()),
            });
        }
        let null: Vec<f64> = cond.null.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let null = Tensor::from_vec(null, (c, 1), noisy.device())?.to_dtype(self.dtype)?;
        let h_prev = self.select_null(&cond.h_prev, &null, &self.null_h)?;
        let h_cur = self.select_null(&cond.h_cur, &null, &self.null_h)?;
        let v = self.select_null(&cond.v, &null, &self.null_v)?;
        let u = self.select_null(&cond.u, &null, &self.null_u)?;

        let rows = self.cond_proj.forward(&upsample_conditions(&h_prev, &h_cur, &v, &u, n)?)?;
        let frames = Tensor::cat(&[prev, noisy], 1)?;
        let mut x = self
            .input
            .forward(&frames)?
            .broadcast_add(&self.frame_pos)?
            .add(&rows)?;

        let temb = self
            .time_mlp2
            .forward(&silu(&self.time_mlp1.forward(&self.timestep_features(t)?)?)?)?;
        let pooled = silu(&rows.mean(1)?.add(&temb)?)?;

        let w = self.dims.width;
        for block in &self.blocks {
            let m = block.modulation.forward(&pooled)?;
            let part = |k: usize| m.narrow(D::Minus1, k * w, w);
            let (sh1, sc1, g1, sh2, sc2, g2) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?, part(5)?);
            let a = block.attn.forward(&modulate(&self.norm.forward(&x)?, &sh1, &sc1)?, None)?;
            x = x.add(&a.broadcast_mul(&g1.unsqueeze(1)?)?)?;
            let f = block.mlp.forward(&modulate(&self.norm.forward(&x)?, &sh2, &sc2)?)?;
            x = x.add(&f.broadcast_mul(&g2.unsqueeze(1)?)?)?;
        }
        let m = self.final_modulation.forward(&pooled)?;
        let x = modulate(&self.norm.forward(&x)?, &m.narrow(1, 0, w)?, &m.narrow(1, w, w)?)?;
        let out = self.output.forward(&x)?;
        Ok(out.narrow(1, n, n)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    pub(crate) fn dims() -> DitDims {
        DitDims {
            n_mels: 5,
            chunk_size: 4,
            width: 8,
            layers: 2,
            heads: 2,
            d_h: 6,
            d_spk: 3,
            d_utt: 3,
        }
    }

    fn randomize(ps: &ParamStore, seed: u64) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for (_, var) in ps.vars() {
            let vals: Vec<f64> = (0..var.elem_count()).map(|_| normal.sample(&mut rng)).collect();
            var.set(&Tensor::from_vec(vals, var.dims(), &Device::Cpu).unwrap()).unwrap();
        }
    }

    fn tensor(shape: &[usize], phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61 + phase).sin()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn cond(c: usize) -> ConditionSet {
        ConditionSet::new(tensor(&[c, 6], 0.1), tensor(&[c, 6], 0.7), tensor(&[c, 3], 1.3), tensor(&[c, 3], 2.1)).unwrap()
    }

    #[test]
    fn returns_only_the_target_frames() {
        let mut ps = ParamStore::new(1, DType::F64);
        let dit = Dit::new(&mut ps, dims()).unwrap();
        let out = dit
            .forward(&cond(2), &tensor(&[2, 4, 5], 0.0), &tensor(&[2, 4, 5], 1.0), &tensor(&[2], 0.4))
            .unwrap();
        assert_eq!(out.dims(), &[2, 4, 5]);
    }

    #[test]
    fn conditions_are_live() {
        let mut ps = ParamStore::new(2, DType::F64);
        let dit = Dit::new(&mut ps, dims()).unwrap();
        randomize(&ps, 5);
        let prev = tensor(&[1, 4, 5], 0.0);
        let noisy = tensor(&[1, 4, 5], 1.0);
        let t = tensor(&[1], 0.4);
        let base = cond(1);
        let swapped = ConditionSet::new(base.h_prev.clone(), base.h_cur.clone(), base.u.clone(), base.v.clone()).unwrap();
        let a = dit.forward(&base, &prev, &noisy, &t).unwrap();
        let b = dit.forward(&swapped, &prev, &noisy, &t).unwrap();
        let n = dit.forward(&base.to_null(), &prev, &noisy, &t).unwrap();
        let diff = |x: &Tensor, y: &Tensor| (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff(&a, &b) > 1e-6);
        assert!(diff(&a, &n) > 1e-6);
        assert!(n.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn null_rows_ignore_condition_content() {
        let mut ps = ParamStore::new(3, DType::F64);
        let dit = Dit::new(&mut ps, dims()).unwrap();
        randomize(&ps, 6);
        let prev = tensor(&[1, 4, 5], 0.0);
        let noisy = tensor(&[1, 4, 5], 1.0);
        let t = tensor(&[1], 0.4);
        let a = dit.forward(&cond(1).to_null(), &prev, &noisy, &t).unwrap();
        let other = ConditionSet::new(tensor(&[1, 6], 3.0), tensor(&[1, 6], 4.0), tensor(&[1, 3], 5.0), tensor(&[1, 3], 6.0))
            .unwrap()
            .to_null();
        let b = dit.forward(&other, &prev, &noisy, &t).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn upsampled_rows_follow_the_chunk_layout() {
        let c = cond(1);
        let rows = upsample_conditions(&c.h_prev, &c.h_cur, &c.v, &c.u, 8).unwrap();
        assert_eq!(rows.dims(), &[1, 16, 12]);
        let r = rows.get(0).unwrap().to_vec2::<f64>().unwrap();
        assert!(r[..8].iter().all(|row| *row == r[0]));
        assert!(r[8..].iter().all(|row| *row == r[8]));
        let changed = ConditionSet::new(c.h_prev.clone(), tensor(&[1, 6], 9.0), c.v.clone(), c.u.clone()).unwrap();
        let r2 = upsample_conditions(&changed.h_prev, &changed.h_cur, &changed.v, &changed.u, 8)
            .unwrap()
            .get(0)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(r[..8], r2[..8]);
        assert!((8..16).all(|i| r[i] != r2[i]));
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut ps = ParamStore::new(4, DType::F64);
        let dit = Dit::new(&mut ps, dims()).unwrap();
        let r = dit.forward(&cond(1), &tensor(&[1, 3, 5], 0.0), &tensor(&[1, 3, 5], 1.0), &tensor(&[1], 0.4));
        assert!(r.is_err());
    }
}
