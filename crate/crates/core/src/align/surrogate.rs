use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{Block, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateAsrDims {
    pub n_mels: usize,
    pub channels: usize,
    pub d_out: usize,
    pub heads: usize,
    pub max_rows: usize,
}

/// Frozen stand-in for a pretrained ASR encoder: two kernel-3 stride-2
/// convolutions over time (rate / 4) and one bidirectional transformer
/// block. Weights come from a seed and are never updated.
pub struct SurrogateAsrEncoder {
    dims: SurrogateAsrDims,
    store: ParamStore,
    conv1: Linear,
    conv2: Linear,
    pos: Tensor,
    block: Block,
    ln: LayerNorm,
    out: Linear,
}

/// Stride-2, kernel-3, padding-1 convolution over rows as one product.
fn conv_k3s2(x: &Tensor, layer: &Linear) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    let zero = Tensor::zeros((1, d), x.dtype(), x.device())?;
    let padded = Tensor::cat(&[&zero, x, &zero], 0)?;
    let out_len = t.div_ceil(2);
    let idx: Vec<u32> = (0..out_len)
        .flat_map(|o| (0..3).map(move |k| (2 * o + k) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, out_len * 3, x.device())?;
    let windows = padded.index_select(&idx, 0)?.reshape((out_len, 3 * d))?;
    Ok(layer.forward(&windows)?.gelu()?)
}

impl SurrogateAsrEncoder {
    pub fn new(dims: SurrogateAsrDims, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed, DType::F32);
        let c = dims.channels;
        let conv1 = Linear::new(&mut store, "asr.conv1", 3 * dims.n_mels, c)?;
        let conv2 = Linear::new(&mut store, "asr.conv2", 3 * c, c)?;
        let pos = store.param("asr.pos", &[dims.max_rows, c], Init::Normal(0.02))?;
        let block = Block::new(&mut store, "asr.block", c, dims.heads)?;
        let ln = LayerNorm::new(&mut store, "asr.ln", c)?;
        let out = Linear::new(&mut store, "asr.out", c, dims.d_out)?;
        Ok(Self {
            dims,
            store,
            conv1,
            conv2,
            pos,
            block,
            ln,
            out,
        })
    }

    pub fn dims(&self) -> &SurrogateAsrDims {
        &self.dims
    }

    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.store.export()
    }

    pub fn import(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        self.store.import(values)
    }

    /// `[L, n_mels]` at the ASR frame rate -> `[ceil(ceil(L / 2) / 2), d_out]`.
    pub fn encode(&self, mel: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        let (l, d) = mel.dim();
        if l == 0 {
            return Err(Error::EmptyInput("surrogate encoder input"));
        }
        if d != self.dims.n_mels {
            return Err(Error::ShapeMismatch {
                expected: format!("[_, {}]", self.dims.n_mels),
                actual: format!("[{l}, {d}]"),
            });
        }
        let x = Tensor::from_iter(mel.iter().copied(), self.store.device())?.reshape((l, d))?;
        let x = conv_k3s2(&conv_k3s2(&x, &self.conv1)?, &self.conv2)?;
        let rows = x.dim(0)?;
        if rows > self.dims.max_rows {
            return Err(Error::InvalidArgument(format!(
                "input yields {rows} rows, encoder supports {}",
                self.dims.max_rows
            )));
        }
        let x = x.add(&self.pos.narrow(0, 0, rows)?)?.unsqueeze(0)?;
        let x = self.ln.forward(&self.block.forward(&x, None)?)?;
        let y = self.out.forward(&x)?.squeeze(0)?.detach();
        let data = y.flatten_all()?.to_vec1::<f32>()?;
        Ok(Array2::from_shape_vec((rows, self.dims.d_out), data).expect("shape from tensor"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> SurrogateAsrDims {
        SurrogateAsrDims {
            n_mels: 12,
            channels: 16,
            d_out: 8,
            heads: 2,
            max_rows: 64,
        }
    }

    fn mel(l: usize) -> Array2<f32> {
        Array2::from_shape_fn((l, 12), |(t, m)| ((t * 5 + m) as f32 * 0.21).cos())
    }

    #[test]
    fn downsamples_by_four() {
        let enc = SurrogateAsrEncoder::new(dims(), 3).unwrap();
        assert_eq!(enc.encode(mel(100).view()).unwrap().dim(), (25, 8));
        assert_eq!(enc.encode(mel(16).view()).unwrap().nrows(), 4);
        assert!(enc.encode(mel(0).view()).is_err());
    }

    #[test]
    fn frozen_and_reproducible() {
        let a = SurrogateAsrEncoder::new(dims(), 3).unwrap();
        let b = SurrogateAsrEncoder::new(dims(), 3).unwrap();
        let m = mel(40);
        assert_eq!(a.encode(m.view()).unwrap(), a.encode(m.view()).unwrap());
        assert_eq!(a.encode(m.view()).unwrap(), b.encode(m.view()).unwrap());
    }

    #[test]
    fn weights_round_trip() {
        let a = SurrogateAsrEncoder::new(dims(), 3).unwrap();
        let b = SurrogateAsrEncoder::new(dims(), 4).unwrap();
        b.import(&a.export().unwrap()).unwrap();
        let m = mel(20);
        assert_eq!(a.encode(m.view()).unwrap(), b.encode(m.view()).unwrap());
    }
}
