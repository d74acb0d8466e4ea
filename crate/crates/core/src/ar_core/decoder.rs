use candle_core::{DType, Device, IndexOp, Tensor};

use super::sequence::{DecoderSequence, Element};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, sigmoid, Block, Init, LayerNorm, Linear, ParamStore, Rope};

#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub vocab_size: usize,
    pub chunk_size: usize,
    pub n_mels: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub d_spk: usize,
    pub d_utt: usize,
}

/// Causal transformer over `[UTT, SPK, TEXT.., TURN_OF_SPEECH, CHUNK..]`
/// emitting one conditioning vector per chunk target, plus the stop head.
///
/// Every position gets a learned absolute position embedding. Attention is
/// additionally rotary over stream ordinals, with separate query and key
/// positions. A key sits at its content ordinal: text token `i` at `i`,
/// chunk `k` at `k`, turn-of-speech at the text length. A query sits at the
/// ordinal of the chunk it predicts next, i.e. the number of chunks at or
/// before it. Text `k` and the query predicting chunk `k` then meet at
/// offset zero in every layout.
#[derive(Debug, Clone)]
pub struct ArDecoder {
    dims: DecoderDims,
    token_emb: Tensor,
    utt_proj: Linear,
    spk_proj: Linear,
    chunk_proj: Linear,
    pos_global: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    stop_head: Linear,
    dtype: DType,
}

/// One sequence of a decoder batch with the rows of its chunks.
pub struct DecoderItem<'a> {
    pub seq: &'a DecoderSequence,
    /// Row in the batch chunk tensor of this sequence's chunk 0.
    pub chunk_offset: usize,
}

impl ArDecoder {
    pub fn new(ps: &mut ParamStore, dims: DecoderDims) -> Result<Self> {
        let d = dims.d_model;
        let token_emb = ps.param("decoder.token_emb", &[dims.vocab_size, d], Init::Normal(0.02))?;
        let utt_proj = Linear::new(ps, "decoder.utt_proj", dims.d_utt, d)?;
        let spk_proj = Linear::new(ps, "decoder.spk_proj", dims.d_spk, d)?;
        let chunk_proj = Linear::new(ps, "decoder.chunk_proj", dims.chunk_size * dims.n_mels, d)?;
        let pos_global = ps.param("decoder.pos_global", &[dims.max_positions, d], Init::Normal(0.02))?;
        let blocks = (0..dims.layers)
            .map(|i| Block::new(ps, &format!("decoder.block{i}"), d, dims.heads))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(ps, "decoder.ln_f", d)?;
        let stop_head = Linear::new(ps, "decoder.stop_head", d, 1)?;
        Ok(Self {
            dims,
            token_emb,
            utt_proj,
            spk_proj,
            chunk_proj,
            pos_global,
            blocks,
            ln_f,
            stop_head,
            dtype: ps.dtype(),
        })
    }

    pub fn dims(&self) -> &DecoderDims {
        &self.dims
    }

    /// Strided projection of chunks `[c, N, D_mel]` to `[c, D_trans]`: a
    /// convolution with kernel and stride `N` over time, as one product.
    pub fn downsample_chunks(&self, chunks: &Tensor) -> Result<Tensor> {
        let (c, n, d) = chunks.dims3()?;
        if n != self.dims.chunk_size || d != self.dims.n_mels {
            return Err(Error::ShapeMismatch {
                expected: format!("[_, {}, {}]", self.dims.chunk_size, self.dims.n_mels),
                actual: format!("[{c}, {n}, {d}]"),
            });
        }
        self.chunk_proj.forward(&chunks.reshape((c, n * d))?)
    }

    /// Single chunk `[N, D_mel]` to `[1, D_trans]`.
    pub fn downsample_chunk(&self, chunk: &Tensor) -> Result<Tensor> {
        let (n, d) = chunk.dims2()?;
        self.downsample_chunks(&chunk.reshape((1, n, d))?)
    }

    /// Hidden states `[b, t_max, D_trans]` for a right-padded batch.
    ///
    /// `u: [b, D_utt]`, `v: [b, D_spk]`, `chunks: [total, N, D_mel]`. Padding
    /// sits after each sequence, so causal attention keeps it invisible.
    pub fn hidden_states(
        &self,
        items: &[DecoderItem<'_>],
        u: &Tensor,
        v: &Tensor,
        chunks: &Tensor,
    ) -> Result<Tensor> {
        let b = items.len();
        let dev = u.device().clone();
        let t_max = items.iter().map(|it| it.seq.len()).max().unwrap_or(0);
        if t_max > self.dims.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence of {t_max} exceeds {} positions",
                self.dims.max_positions
            )));
        }
        let total_chunks = chunks.dim(0)?;
        let vocab = self.dims.vocab_size;
        let chunk_base = vocab;
        let utt_base = chunk_base + total_chunks;
        let spk_base = utt_base + b;
        let pad_row = spk_base + b;

        let mut ids = Vec::with_capacity(b * t_max);
        let mut q_pos = Vec::with_capacity(b * t_max);
        let mut k_pos = Vec::with_capacity(b * t_max);
        for (bi, item) in items.iter().enumerate() {
            let mut text_ord = 0u32;
            let mut chunks_seen = 0u32;
            for e in &item.seq.elements {
                let (row, key) = match *e {
                    Element::Utt => (utt_base + bi, 0),
                    Element::Spk => (spk_base + bi, 0),
                    Element::Text(t) => {
                        if t as usize >= vocab {
                            return Err(Error::InvalidArgument(format!("token {t} outside vocabulary")));
                        }
                        text_ord += 1;
                        (t as usize, text_ord - 1)
                    }
                    Element::TurnOfSpeech => (super::tokenizer::TURN_OF_SPEECH as usize, text_ord),
                    Element::Filling => (super::tokenizer::FILLING as usize, chunks_seen),
                    Element::Chunk(k) => {
                        let row = item.chunk_offset + k;
                        if row >= total_chunks {
                            return Err(Error::MalformedSequence(format!(
                                "chunk {k} has no frames in the batch"
                            )));
                        }
                        chunks_seen += 1;
                        (chunk_base + row, k as u32)
                    }
                };
                ids.push(row as u32);
                k_pos.push(key);
                q_pos.push(chunks_seen);
            }
            for _ in item.seq.len()..t_max {
                ids.push(pad_row as u32);
                k_pos.push(0);
                q_pos.push(0);
            }
        }

        let d = self.dims.d_model;
        let zero = Tensor::zeros((1, d), self.dtype, &dev)?;
        let chunk_emb = if total_chunks > 0 {
            self.downsample_chunks(chunks)?
        } else {
            Tensor::zeros((0, d), self.dtype, &dev)?
        };
        let table = Tensor::cat(
            &[
                &self.token_emb,
                &chunk_emb,
                &self.utt_proj.forward(u)?,
                &self.spk_proj.forward(v)?,
                &zero,
            ],
            0,
        )?;
        let ids = Tensor::from_vec(ids, b * t_max, &dev)?;
        let x = table
            .index_select(&ids, 0)?
            .reshape((b, t_max, d))?
            .broadcast_add(&self.pos_global.narrow(0, 0, t_max)?)?;

        let mask = causal_mask(t_max, self.dtype, &dev)?;
        let rope = Rope::new(&q_pos, &k_pos, b, t_max, d / self.dims.heads, self.dtype, &dev)?;
        let mut x = x;
        for block in &self.blocks {
            x = block.forward_rotary(&x, Some(&mask), Some(&rope))?;
        }
        self.ln_f.forward(&x)
    }

    /// Gathers `[rows, D]` from `hidden: [b, t, D]` at `(batch, position)` pairs.
    pub fn gather(hidden: &Tensor, at: &[(usize, usize)]) -> Result<Tensor> {
        let (b, t, d) = hidden.dims3()?;
        let idx: Vec<u32> = at.iter().map(|&(bi, p)| (bi * t + p) as u32).collect();
        let idx = Tensor::from_vec(idx, at.len(), hidden.device())?;
        Ok(hidden.reshape((b * t, d))?.index_select(&idx, 0)?)
    }

    /// Teacher-forced conditioning sequence `h`: `[num_chunks, D_trans]`, read
    /// at the position preceding each chunk target.
    pub fn decoder_forward(
        &self,
        seq: &DecoderSequence,
        u: &Tensor,
        v: &Tensor,
        chunks: &Tensor,
    ) -> Result<Tensor> {
        seq.validate()?;
        if chunks.dim(0)? < seq.num_chunks() {
            return Err(Error::MalformedSequence(format!(
                "{} chunk targets but {} chunks supplied",
                seq.num_chunks(),
                chunks.dim(0)?
            )));
        }
        let hidden = self.hidden_states(
            &[DecoderItem {
                seq,
                chunk_offset: 0,
            }],
            u,
            v,
            chunks,
        )?;
        let at: Vec<(usize, usize)> = seq.read_positions().into_iter().map(|p| (0, p)).collect();
        Self::gather(&hidden, &at)
    }

    /// Stop logits `[..]` for hidden vectors `[.., D_trans]`.
    pub fn stop_logits(&self, h: &Tensor) -> Result<Tensor> {
        Ok(self.stop_head.forward(h)?.squeeze(candle_core::D::Minus1)?)
    }

    pub fn stop_probability(&self, h: &Tensor) -> Result<Tensor> {
        sigmoid(&self.stop_logits(h)?)
    }

    pub fn stop_head(&self) -> &Linear {
        &self.stop_head
    }

    /// The hidden state at the last position of batch row `b`.
    pub fn last(hidden: &Tensor, b: usize, len: usize) -> Result<Tensor> {
        Ok(hidden.i((b, len - 1))?)
    }

    pub fn device(&self) -> &Device {
        self.token_emb.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar_core::offline_layout;

    fn dims() -> DecoderDims {
        DecoderDims {
            vocab_size: 12,
            chunk_size: 2,
            n_mels: 3,
            d_model: 8,
            layers: 2,
            heads: 2,
            max_positions: 32,
            d_spk: 4,
            d_utt: 4,
        }
    }

    fn inputs(ps: &ParamStore, n_chunks: usize, seed: f64) -> (Tensor, Tensor, Tensor) {
        let dev = ps.device();
        let u = Tensor::new(&[[0.1f64, -0.2, 0.3, 0.4]], dev).unwrap();
        let v = Tensor::new(&[[0.5f64, 0.1, -0.3, 0.2]], dev).unwrap();
        let vals: Vec<f64> = (0..n_chunks * 6).map(|i| ((i as f64 + seed) * 0.7).sin()).collect();
        let chunks = Tensor::from_vec(vals, (n_chunks, 2, 3), dev).unwrap();
        (u, v, chunks)
    }

    #[test]
    fn h_has_one_row_per_chunk() {
        let mut ps = ParamStore::new(1, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let (u, v, chunks) = inputs(&ps, 3, 0.0);
        let h = dec.decoder_forward(&offline_layout(&[4, 5, 6, 7], 3), &u, &v, &chunks).unwrap();
        assert_eq!(h.dims(), &[3, 8]);
        let h1 = dec
            .decoder_forward(&offline_layout(&[4], 1), &u, &v, &chunks.narrow(0, 0, 1).unwrap())
            .unwrap();
        assert_eq!(h1.dims(), &[1, 8]);
    }

    #[test]
    fn downsample_maps_chunk_to_one_vector() {
        let mut ps = ParamStore::new(2, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let (_, _, chunks) = inputs(&ps, 2, 1.0);
        let a = dec.downsample_chunk(&chunks.get(0).unwrap()).unwrap();
        let b = dec.downsample_chunk(&chunks.get(1).unwrap()).unwrap();
        assert_eq!(a.dims(), &[1, 8]);
        let diff = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-6);
        let wrong = Tensor::zeros((3, 3), DType::F64, ps.device()).unwrap();
        assert!(dec.downsample_chunk(&wrong).is_err());
    }

    #[test]
    fn zero_projection_yields_bias() {
        let mut ps = ParamStore::new(2, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let w = ps.get("decoder.chunk_proj.weight").unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let b = ps.get("decoder.chunk_proj.bias").unwrap();
        b.set(&Tensor::new(&[1.0f64, 2., 3., 4., 5., 6., 7., 8.], ps.device()).unwrap()).unwrap();
        let zero = Tensor::zeros((2, 3), DType::F64, ps.device()).unwrap();
        let out = dec.downsample_chunk(&zero).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out[0], vec![1.0, 2., 3., 4., 5., 6., 7., 8.]);
    }

    #[test]
    fn future_positions_do_not_leak() {
        let mut ps = ParamStore::new(3, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let (u, v, chunks) = inputs(&ps, 3, 0.0);
        let seq = offline_layout(&[4, 5, 6], 3);
        let item = [DecoderItem { seq: &seq, chunk_offset: 0 }];
        let base = dec.hidden_states(&item, &u, &v, &chunks).unwrap().to_vec3::<f64>().unwrap();
        // zero chunk 2 (element 8): positions <= 7 must be unchanged
        let mut vals = chunks.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        vals[12..].iter_mut().for_each(|x| *x = 0.0);
        let chunks2 = Tensor::from_vec(vals, (3, 2, 3), ps.device()).unwrap();
        let pert = dec.hidden_states(&item, &u, &v, &chunks2).unwrap().to_vec3::<f64>().unwrap();
        for p in 0..seq.len() {
            let same = base[0][p] == pert[0][p];
            assert_eq!(same, p < 8, "position {p}");
        }
    }

    #[test]
    fn right_padding_does_not_change_real_positions() {
        let mut ps = ParamStore::new(4, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let (u, v, chunks) = inputs(&ps, 4, 0.0);
        let short = offline_layout(&[4], 1);
        let long = offline_layout(&[4, 5, 6], 3);
        let alone = dec
            .hidden_states(&[DecoderItem { seq: &short, chunk_offset: 0 }], &u, &v, &chunks)
            .unwrap();
        let u2 = Tensor::cat(&[&u, &u], 0).unwrap();
        let v2 = Tensor::cat(&[&v, &v], 0).unwrap();
        let batched = dec
            .hidden_states(
                &[
                    DecoderItem { seq: &short, chunk_offset: 0 },
                    DecoderItem { seq: &long, chunk_offset: 1 },
                ],
                &u2,
                &v2,
                &chunks,
            )
            .unwrap();
        let a = alone.get(0).unwrap();
        let b = batched.get(0).unwrap().narrow(0, 0, short.len()).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn stop_probability_is_half_with_zero_head() {
        let mut ps = ParamStore::new(5, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let w = ps.get("decoder.stop_head.weight").unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let h = Tensor::new(&[[1.0f64, -2., 3., 0.5, 0., 1., 2., 3.]], ps.device()).unwrap();
        let p = dec.stop_probability(&h).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let mut ps = ParamStore::new(6, DType::F64);
        let dec = ArDecoder::new(&mut ps, dims()).unwrap();
        let (u, v, chunks) = inputs(&ps, 2, 0.0);
        let mut seq = offline_layout(&[4], 2);
        seq.loss_mask[1] = true;
        assert!(dec.decoder_forward(&seq, &u, &v, &chunks).is_err());
        let seq = offline_layout(&[4], 3);
        assert!(dec.decoder_forward(&seq, &u, &v, &chunks).is_err());
    }
}
