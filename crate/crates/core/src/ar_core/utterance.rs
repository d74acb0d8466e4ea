use candle_core::{DType, Tensor};
use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::nn::{padding_mask, Block, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct UtteranceDims {
    pub n_mels: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_frames: usize,
    pub d_utt: usize,
}

/// Bidirectional transformer over a mel crop, mean-pooled to one vector.
/// Trained jointly with the decoder.
#[derive(Debug, Clone)]
pub struct UtteranceEncoder {
    dims: UtteranceDims,
    input: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    out: Linear,
    dtype: DType,
}

impl UtteranceEncoder {
    pub fn new(ps: &mut ParamStore, dims: UtteranceDims) -> Result<Self> {
        let w = dims.width;
        Ok(Self {
            dims,
            input: Linear::new(ps, "utt.input", dims.n_mels, w)?,
            pos: ps.param("utt.pos", &[dims.max_frames, w], Init::Normal(0.02))?,
            blocks: (0..dims.layers)
                .map(|i| Block::new(ps, &format!("utt.block{i}"), w, dims.heads))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(ps, "utt.ln", w)?,
            out: Linear::new(ps, "utt.out", w, dims.d_utt)?,
            dtype: ps.dtype(),
        })
    }

    pub fn dims(&self) -> &UtteranceDims {
        &self.dims
    }

    /// `[b, D_utt]` for a batch of crops of possibly different lengths.
    pub fn encode_batch(&self, segments: &[ArrayView2<'_, f32>]) -> Result<Tensor> {
        if segments.is_empty() {
            return Err(Error::EmptyInput("utterance batch"));
        }
        let d = self.dims.n_mels;
        let lengths: Vec<usize> = segments.iter().map(|s| s.nrows().min(self.dims.max_frames)).collect();
        if lengths.contains(&0) {
            return Err(Error::EmptyInput("utterance segment"));
        }
        if let Some(s) = segments.iter().find(|s| s.ncols() != d) {
            return Err(Error::ShapeMismatch {
                expected: format!("[_, {d}]"),
                actual: format!("[{}, {}]", s.nrows(), s.ncols()),
            });
        }
        let t = *lengths.iter().max().expect("non-empty");
        let b = segments.len();
        let mut data = vec![0f32; b * t * d];
        let mut weights = vec![0f32; b * t];
        for (bi, (seg, &len)) in segments.iter().zip(&lengths).enumerate() {
            for (fi, row) in seg.rows().into_iter().take(len).enumerate() {
                let off = (bi * t + fi) * d;
                data[off..off + d].iter_mut().zip(row).for_each(|(o, v)| *o = *v);
                weights[bi * t + fi] = 1.0 / len as f32;
            }
        }
        let dev = self.pos.device();
        let x = Tensor::from_vec(data, (b, t, d), dev)?.to_dtype(self.dtype)?;
        let mut x = self
            .input
            .forward(&x)?
            .broadcast_add(&self.pos.narrow(0, 0, t)?)?;
        let mask = padding_mask(&lengths, t, self.dtype, dev)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let x = self.ln.forward(&x)?;
        let w = Tensor::from_vec(weights, (b, t, 1), dev)?.to_dtype(self.dtype)?;
        let pooled = x.broadcast_mul(&w)?.sum(1)?;
        self.out.forward(&pooled)
    }

    /// `[1, D_utt]` for a single crop.
    pub fn encode_utterance(&self, segment: ArrayView2<'_, f32>) -> Result<Tensor> {
        self.encode_batch(&[segment])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn encoder() -> (ParamStore, UtteranceEncoder) {
        let mut ps = ParamStore::new(11, DType::F64);
        let enc = UtteranceEncoder::new(
            &mut ps,
            UtteranceDims {
                n_mels: 6,
                width: 8,
                heads: 2,
                layers: 1,
                max_frames: 16,
                d_utt: 5,
            },
        )
        .unwrap();
        (ps, enc)
    }

    fn segment(len: usize) -> Array2<f32> {
        Array2::from_shape_fn((len, 6), |(t, m)| ((t * 7 + m * 3) as f32 * 0.37).sin())
    }

    #[test]
    fn shape_and_finiteness() {
        let (_, enc) = encoder();
        let u = enc.encode_utterance(segment(10).view()).unwrap();
        assert_eq!(u.dims(), &[1, 5]);
        assert!(u.to_vec2::<f64>().unwrap()[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn position_aware() {
        let (_, enc) = encoder();
        let seg = segment(10);
        let mut shuffled = seg.clone();
        for t in 0..10 {
            shuffled.row_mut(t).assign(&seg.row((t * 3) % 10));
        }
        let a = enc.encode_utterance(seg.view()).unwrap();
        let b = enc.encode_utterance(shuffled.view()).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-6);
    }

    #[test]
    fn padding_does_not_leak_into_short_items() {
        let (_, enc) = encoder();
        let short = segment(4);
        let long = segment(12);
        let alone = enc.encode_utterance(short.view()).unwrap().to_vec2::<f64>().unwrap();
        let batched = enc.encode_batch(&[short.view(), long.view()]).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in alone[0].iter().zip(&batched[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_encoder() {
        let (ps, enc) = encoder();
        let u = enc.encode_utterance(segment(9).view()).unwrap();
        let grads = u.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let w = ps.get("utt.input.weight").unwrap();
        let g = grads.get(w.as_tensor()).unwrap();
        assert!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn empty_segment_is_an_error() {
        let (_, enc) = encoder();
        assert!(enc.encode_utterance(Array2::<f32>::zeros((0, 6)).view()).is_err());
    }
}
