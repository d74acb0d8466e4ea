use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::corpus::Utterance;
use super::data::{NormStats, PreparedUtterance};
use super::model::Model;
use crate::align::{cosine_rows_loss, AlignTarget};
use crate::ar_core::{build_training_sequence, stop_loss_from_logits, ArDecoder, DecoderItem, DecoderSequence, Layout};
use crate::diffusion::{diffusion_loss, forward_diffuse_batch, ConditionSet};
use crate::error::{Error, Result};
use crate::nn::{tensor_to_f64, warmup_cosine, AdamW};
use crate::streaming::mixed_batch;

/// Generator for everything random in step `step`; a pure function of the
/// run seed and the step, so resumed runs draw the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA076_1D64_78BD_642F);
    rng.set_stream(step);
    rng
}

/// All random choices of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub step: u64,
    pub indices: Vec<usize>,
    pub layouts: Vec<Layout>,
    /// `(start, len)` of each utterance-embedding crop.
    pub crops: Vec<(usize, usize)>,
    /// Per chunk, in batch order.
    pub null: Vec<bool>,
    pub times: Vec<f64>,
    pub noise: Vec<f32>,
}

pub fn plan_batch(config: &TrainConfig, data: &[PreparedUtterance], step: u64) -> Result<BatchPlan> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut rng = step_rng(config.seed, step);
    let b = config.batch_size.min(data.len());
    let indices = sample(&mut rng, data.len(), b).into_vec();
    let layouts = mixed_batch(b, config.interleave_fraction, config.policy, &mut rng)?;
    let crops = indices
        .iter()
        .map(|&i| {
            let total = data[i].mel.nrows();
            if total <= config.crop_min_frames {
                return (0, total);
            }
            let len = rng.random_range(config.crop_min_frames..=config.crop_max_frames.min(total));
            (rng.random_range(0..=total - len), len)
        })
        .collect();
    let chunks: usize = indices.iter().map(|&i| data[i].num_chunks()).sum();
    let null = (0..chunks).map(|_| rng.random_bool(config.condition_dropout)).collect();
    let times = (0..chunks).map(|_| rng.random::<f64>()).collect();
    let frame_values = config.model.chunk_size * config.model.tts_mel.n_mels;
    let noise = (0..chunks * frame_values).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(BatchPlan {
        step,
        indices,
        layouts,
        crops,
        null,
        times,
        noise,
    })
}

/// Loss tensors of one batch; `total` is exactly the sum of the three.
pub struct Losses {
    pub diff: Tensor,
    pub stop: Tensor,
    pub align: Tensor,
    pub total: Tensor,
    pub align_rows: usize,
    pub align_skipped: usize,
}

/// Teacher-forced decoder pass over a batch. Returns `h: [chunks, D]` in
/// batch order with the per-utterance chunk offsets and sequences.
pub fn teacher_forced_h(
    model: &Model,
    utts: &[&PreparedUtterance],
    layouts: &[Layout],
    u: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, Tensor, Vec<usize>, Vec<DecoderSequence>)> {
    let seqs = utts
        .iter()
        .zip(layouts)
        .map(|(p, &l)| build_training_sequence(&p.text, p.num_chunks(), l))
        .collect::<Result<Vec<_>>>()?;
    let mut offsets = Vec::with_capacity(utts.len());
    let mut total = 0;
    for p in utts {
        offsets.push(total);
        total += p.num_chunks();
    }
    let flat: Vec<f32> = utts.iter().flat_map(|p| p.chunks.iter().copied()).collect();
    let x0 = model.chunk_tensor(flat, total)?;
    let items: Vec<DecoderItem<'_>> = seqs
        .iter()
        .zip(&offsets)
        .map(|(seq, &chunk_offset)| DecoderItem { seq, chunk_offset })
        .collect();
    let hidden = model.decoder().hidden_states(&items, u, v, &x0)?;
    let at: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(b, s)| s.read_positions().into_iter().map(move |p| (b, p)))
        .collect();
    let h = ArDecoder::gather(&hidden, &at)?;
    Ok((h, x0, offsets, seqs))
}

/// Rows of `[table ; extra]` where chunk `k` of an utterance takes row
/// `offset + k - 1`, or `extra` when `k == 0`.
fn shifted_rows(table: &Tensor, extra: &Tensor, utts: &[&PreparedUtterance], offsets: &[usize]) -> Result<Tensor> {
    let n = table.dim(0)?;
    let idx: Vec<u32> = utts
        .iter()
        .zip(offsets)
        .flat_map(|(p, &o)| (0..p.num_chunks()).map(move |k| if k == 0 { n as u32 } else { (o + k - 1) as u32 }))
        .collect();
    let idx = Tensor::from_vec(idx, n, table.device())?;
    Ok(Tensor::cat(&[table, &extra.unsqueeze(0)?], 0)?.index_select(&idx, 0)?)
}

fn per_chunk_rows(x: &Tensor, utts: &[&PreparedUtterance]) -> Result<Tensor> {
    let idx: Vec<u32> = utts
        .iter()
        .enumerate()
        .flat_map(|(b, p)| std::iter::repeat_n(b as u32, p.num_chunks()))
        .collect();
    let n = idx.len();
    Ok(x.index_select(&Tensor::from_vec(idx, n, x.device())?, 0)?)
}

pub fn compute_losses(model: &Model, data: &[PreparedUtterance], plan: &BatchPlan) -> Result<Losses> {
    let utts: Vec<&PreparedUtterance> = plan.indices.iter().map(|&i| &data[i]).collect();
    let crops: Vec<_> = utts
        .iter()
        .zip(&plan.crops)
        .map(|(p, &(s, l))| p.mel.slice(ndarray::s![s..s + l, ..]))
        .collect();
    let u = model.utterance_embeddings(&crops)?;
    let spk: Vec<&[f32]> = utts.iter().map(|p| p.speaker_embedding.as_slice()).collect();
    let v = model.speaker_tensor(&spk)?;
    let (h, x0, offsets, seqs) = teacher_forced_h(model, &utts, &plan.layouts, &u, &v)?;
    let total = x0.dim(0)?;
    if plan.times.len() != total || plan.null.len() != total {
        return Err(Error::LengthMismatch(format!(
            "plan covers {} chunks, batch has {total}",
            plan.times.len()
        )));
    }
    let dev = x0.device();
    let dtype = x0.dtype();

    let labels: Vec<f32> = seqs.iter().flat_map(|s| s.stop_labels.iter().copied()).collect();
    let labels = Tensor::from_vec(labels, total, dev)?.to_dtype(dtype)?;
    let stop = stop_loss_from_logits(&model.decoder().stop_logits(&h)?, &labels)?;

    let dit = model.dit();
    let h_prev = shifted_rows(&h, dit.start_h(), &utts, &offsets)?;
    let (c, n, d) = x0.dims3()?;
    let prev = shifted_rows(&x0.reshape((c, n * d))?, &dit.start_chunk().flatten_all()?, &utts, &offsets)?
        .reshape((c, n, d))?;
    let cond = ConditionSet::new(h_prev, h.clone(), per_chunk_rows(&v, &utts)?, per_chunk_rows(&u, &utts)?)?
        .with_null(plan.null.clone())?;
    let eps = model.chunk_tensor(plan.noise.clone(), total)?;
    let noisy = forward_diffuse_batch(&x0, &plan.times, &eps)?;
    let t = Tensor::from_vec(plan.times.clone(), total, dev)?.to_dtype(dtype)?;
    let pred = dit.forward(&cond, &prev, &noisy, &t)?;
    let valid: Vec<usize> = utts.iter().flat_map(|p| p.valid_frames.iter().copied()).collect();
    let diff = diffusion_loss(&pred, &x0, &valid)?;

    let (align, align_rows, align_skipped) = match (model.config().align_target, model.tam()) {
        (AlignTarget::Asr, Some(tam)) => {
            let projected = tam.forward(&h)?;
            let views: Vec<_> = utts.iter().map(|p| p.asr_target.view()).collect();
            let target = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
            let (r, w) = target.dim();
            let target = Tensor::from_iter(target.into_iter(), dev)?.reshape((r, w))?.to_dtype(dtype)?;
            let mask: Vec<bool> = utts.iter().flat_map(|p| p.asr_mask.iter().copied()).collect();
            let l = cosine_rows_loss(&projected, &target, &mask)?;
            (l.loss, l.rows, l.skipped)
        }
        (AlignTarget::Mel, Some(tam)) => {
            let projected = tam.forward(&h)?;
            let target = x0.reshape((c * n, d))?;
            let mask: Vec<bool> = valid.iter().flat_map(|&vf| (0..n).map(move |f| f < vf)).collect();
            let l = cosine_rows_loss(&projected, &target, &mask)?;
            (l.loss, l.rows, l.skipped)
        }
        _ => (Tensor::zeros((), dtype, dev)?, 0, 0),
    };
    let total = diff.add(&stop)?.add(&align)?;
    Ok(Losses {
        diff,
        stop,
        align,
        total,
        align_rows,
        align_skipped,
    })
}

/// Scalar view of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub diff: f64,
    pub stop: f64,
    pub align: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(tensor_to_f64(t)?[0])
}

/// Mutable training state: model, optimizer and step counter.
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

/// Per-band statistics of both mel grids over a corpus.
pub fn fit_stats(utterances: &[Utterance]) -> Result<(NormStats, NormStats)> {
    let tts = NormStats::fit(utterances.iter().map(|u| u.tts_mel.view()))?;
    let asr = NormStats::fit(utterances.iter().map(|u| u.asr_mel.view()))?;
    Ok((tts, asr))
}

impl TrainState {
    pub fn new(config: TrainConfig, stats: (NormStats, NormStats)) -> Result<Self> {
        Self::with_dtype(config, stats, DType::F32)
    }

    pub fn with_dtype(config: TrainConfig, stats: (NormStats, NormStats), dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model.clone(), config.seed, dtype)?;
        model.set_stats(stats.0, stats.1);
        let optimizer = AdamW::new(model.params(), config.optimizer)?;
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        warmup_cosine(self.step, self.config.steps, self.config.learning_rate, self.config.warmup_fraction)
    }
}

/// One optimizer update on `L_diff + L_stop + L_align`.
pub fn train_step(state: &mut TrainState, data: &[PreparedUtterance]) -> Result<LossBreakdown> {
    let plan = plan_batch(&state.config, data, state.step)?;
    let losses = compute_losses(&state.model, data, &plan)?;
    let (diff, stop, align, total) = (
        scalar(&losses.diff)?,
        scalar(&losses.stop)?,
        scalar(&losses.align)?,
        scalar(&losses.total)?,
    );
    if !(diff.is_finite() && stop.is_finite() && align.is_finite()) {
        log::error!(
            "non-finite loss at step {} on utterances {:?} with layouts {:?}",
            state.step,
            plan.indices.iter().map(|&i| data[i].id).collect::<Vec<_>>(),
            plan.layouts
        );
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch_id: state.step,
            diff,
            stop,
            align,
        });
    }
    let grads = losses.total.backward()?;
    let lr = state.learning_rate();
    let grad_norm = state.optimizer.update(state.model.params(), &grads, lr)?;
    let out = LossBreakdown {
        step: state.step,
        diff,
        stop,
        align,
        total,
        grad_norm,
        lr,
    };
    state.step += 1;
    Ok(out)
}
