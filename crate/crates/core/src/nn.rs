//! Minimal layer toolkit over `candle_core`: a seeded parameter store,
//! linear / norm / attention blocks and an AdamW optimizer whose state can
//! be persisted.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable parameters with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates parameter `name`; panics on duplicate names, which would be
    /// a model-construction bug.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        assert!(!self.vars.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter as `f32`, keyed by name.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), tensor_to_f32(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites parameters in place from a snapshot; every name and shape
    /// must match before anything is written.
    pub fn import(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if shape.as_slice() != var.dims() || data.len() != var.elem_count() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {shape:?}, model expects {:?}",
                    var.dims()
                )));
            }
        }
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = &values[name];
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub fn tensor_to_f32(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    let shape = t.dims().to_vec();
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((shape, data))
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Applies a `[.., in] x [in, out]` product over any leading dimensions.
fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (lead, last) = dims.split_at(dims.len() - 1);
    let rows: usize = lead.iter().product();
    let y = x.reshape((rows, last[0]))?.matmul(w)?;
    let mut out_dims = lead.to_vec();
    out_dims.push(w.dim(1)?);
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::Normal((1.0 / d_in as f64).sqrt()), true)
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::Zeros, true)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[d_in, d_out], init)?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Layer normalization over the last dimension, optionally affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    scale: Option<(Tensor, Tensor)>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.param(&format!("{name}.gamma"), &[dim], Init::Ones)?;
        let beta = ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?;
        Ok(Self {
            scale: Some((gamma, beta)),
            eps: 1e-5,
        })
    }

    pub fn plain() -> Self {
        Self {
            scale: None,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(match &self.scale {
            Some((g, b)) => normed.broadcast_mul(g)?.broadcast_add(b)?,
            None => normed,
        })
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + exp(x))` evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Additive causal mask `[t, t]`: 0 on and below the diagonal, -inf above.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(values, (t, t), device)?.to_dtype(dtype)?)
}

/// Additive key-padding mask `[b, 1, 1, t]` from per-row valid lengths.
pub fn padding_mask(lengths: &[usize], t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = lengths
        .iter()
        .flat_map(|&len| (0..t).map(move |j| if j < len { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(values, (lengths.len(), 1, 1, t), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// `x: [b, t, d]`; `mask` is additive and broadcastable to `[b, h, t, t]`.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.forward_rotary(x, mask, None)
    }

    pub fn forward_rotary(&self, x: &Tensor, mask: Option<&Tensor>, rope: Option<&Rope>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let mut q = qkv.get(0)?.contiguous()?;
        let mut k = qkv.get(1)?.contiguous()?;
        if let Some(r) = rope {
            q = r.rotate(&q, &r.q_cos, &r.q_sin)?;
            k = r.rotate(&k, &r.k_cos, &r.k_sin)?;
        }
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax_last(&scores)?;
        let y = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.out.forward(&y)
    }
}

/// Rotary tables with separate query and key positions, `[b, 1, t, dh]`.
#[derive(Debug, Clone)]
pub struct Rope {
    q_cos: Tensor,
    q_sin: Tensor,
    k_cos: Tensor,
    k_sin: Tensor,
}

impl Rope {
    pub const BASE: f64 = 10_000.0;

    /// `q_pos` and `k_pos` hold `b * t` positions, row-major.
    pub fn new(q_pos: &[u32], k_pos: &[u32], b: usize, t: usize, dh: usize, dtype: DType, dev: &Device) -> Result<Self> {
        if dh % 2 != 0 || q_pos.len() != b * t || k_pos.len() != b * t {
            return Err(Error::InvalidArgument(format!(
                "rotary tables need an even head width and {} positions",
                b * t
            )));
        }
        let half = dh / 2;
        let table = |pos: &[u32]| -> Result<(Tensor, Tensor)> {
            let mut c = Vec::with_capacity(pos.len() * dh);
            let mut s = Vec::with_capacity(pos.len() * dh);
            for &p in pos {
                for j in 0..dh {
                    let freq = Self::BASE.powf(-((j % half) as f64) / half as f64);
                    let a = p as f64 * freq;
                    c.push(a.cos());
                    s.push(a.sin());
                }
            }
            let c = Tensor::from_vec(c, (b, 1, t, dh), dev)?.to_dtype(dtype)?;
            let s = Tensor::from_vec(s, (b, 1, t, dh), dev)?.to_dtype(dtype)?;
            Ok((c, s))
        };
        let (q_cos, q_sin) = table(q_pos)?;
        let (k_cos, k_sin) = table(k_pos)?;
        Ok(Self { q_cos, q_sin, k_cos, k_sin })
    }

    fn rotate(&self, x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
        let dh = x.dim(candle_core::D::Minus1)?;
        let half = dh / 2;
        let x1 = x.narrow(candle_core::D::Minus1, 0, half)?;
        let x2 = x.narrow(candle_core::D::Minus1, half, half)?;
        let rot = Tensor::cat(&[&x2.neg()?, &x1], candle_core::D::Minus1)?;
        Ok((x.broadcast_mul(cos)? + rot.broadcast_mul(sin)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, 4 * dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        self.forward_rotary(x, mask, None)
    }

    pub fn forward_rotary(&self, x: &Tensor, mask: Option<&Tensor>, rope: Option<&Rope>) -> Result<Tensor> {
        let x = (x + self.attn.forward_rotary(&self.ln1.forward(x)?, mask, rope)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moments are keyed by parameter name so
/// they can be checkpointed alongside the parameters.
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(ps: &ParamStore, config: AdamWConfig) -> Result<Self> {
        let moments = ps
            .vars()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok((name.clone(), (z.clone(), z)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    /// Global gradient norm before clipping.
    pub fn update(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in ps.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * clip)?;
            let (m, v) = self.moments.get_mut(name).expect("moments track every parameter");
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let step = ((&*m / bc1)? / ((&*v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor().detach();
            let decay = if var.rank() >= 2 { c.weight_decay } else { 0.0 };
            let next = ((&theta * (1.0 - lr * decay))? - (step * lr)?)?;
            var.set(&next)?;
        }
        Ok(norm)
    }

    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m/{name}"), tensor_to_f32(m)?);
            out.insert(format!("v/{name}"), tensor_to_f32(v)?);
        }
        Ok(out)
    }

    pub fn import(
        &mut self,
        values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
        step: u64,
    ) -> Result<()> {
        let mut next = BTreeMap::new();
        for (name, (m, _)) in &self.moments {
            let load = |key: String| -> Result<Tensor> {
                let (shape, data) = values
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if shape.as_slice() != m.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                Ok(Tensor::from_slice(data, shape.as_slice(), m.device())?.to_dtype(m.dtype())?)
            };
            next.insert(
                name.clone(),
                (load(format!("m/{name}"))?, load(format!("v/{name}"))?),
            );
        }
        self.moments = next;
        self.step = step;
        Ok(())
    }
}

/// Linear warmup over the first `warmup` fraction of steps, then cosine
/// decay to zero.
pub fn warmup_cosine(step: u64, total: u64, peak: f64, warmup: f64) -> f64 {
    let total = total.max(1) as f64;
    let s = step as f64;
    let warm = (warmup * total).max(1.0);
    if s < warm {
        peak * (s + 1.0) / warm
    } else {
        let progress = ((s - warm) / (total - warm).max(1.0)).min(1.0);
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
