use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{content_accuracy, Corpus, Utterance};
use super::data::{prepare, PreparedUtterance};
use super::model::Model;
use super::train::{teacher_forced_h, LossBreakdown};
use crate::ar_core::{cosine, Layout};
use crate::diffusion::{forward_diffuse_batch, ConditionSet};
use crate::error::{Error, Result};
use crate::nn::tensor_to_f32;
use crate::streaming::{generate_batch, Conditioning, GenerationConfig, InterleavePolicy, StopReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Offline,
    Streaming,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Self::Offline),
            "streaming" => Ok(Self::Streaming),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub policy: InterleavePolicy,
    pub generation: GenerationConfig,
    /// Sessions generated in lockstep.
    pub batch: usize,
    /// Seed of the teacher-forced diffusion probe.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::Offline,
            policy: InterleavePolicy::default(),
            generation: GenerationConfig::default(),
            batch: 16,
            seed: 0,
        }
    }
}

impl EvalOptions {
    fn layout(&self) -> Layout {
        match self.mode {
            EvalMode::Offline => Layout::Offline,
            EvalMode::Streaming => Layout::Interleaved(self.policy),
        }
    }
}

/// One evaluation point. Accuracies lie in `[0, 1]`; the speaker scores are
/// cosines in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub step: u64,
    pub mode: EvalMode,
    pub utterances: usize,
    /// Oracle-decoded token match rate of generated speech.
    pub content_accuracy: f64,
    /// Speaker cosine between generated speech and its same-speaker prompt.
    pub ss_proxy: f64,
    /// Speaker cosine between generated speech and a cross-speaker reference.
    pub ss_cross: f64,
    /// Teacher-forced per-chunk stop decisions.
    pub stop_accuracy: f64,
    /// Fraction of generations with the reference chunk count.
    pub length_accuracy: f64,
    /// Teacher-forced x0 error per mel value at uniformly drawn `t`.
    pub diff_mse: f64,
    pub truncated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<LossBreakdown>,
}

/// Index of another utterance in `pool` whose speaker matches (or differs
/// from) `u`'s, searching cyclically after `u`.
fn partner<'a>(pool: &'a [Utterance], u: &Utterance, same: bool) -> Option<&'a Utterance> {
    let start = pool.iter().position(|p| p.id == u.id).unwrap_or(0);
    (1..=pool.len())
        .map(|k| &pool[(start + k) % pool.len()])
        .find(|p| p.id != u.id && (p.speaker == u.speaker) == same)
}

/// Teacher-forced stop accuracy and per-value x0 error.
fn teacher_forced_metrics(model: &Model, data: &[PreparedUtterance], opts: &EvalOptions) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5DEE_CE66);
    let cfg = model.config();
    let (n, d) = (cfg.chunk_size, cfg.tts_mel.n_mels);
    let (mut stop_hits, mut stop_total) = (0usize, 0usize);
    let (mut sq, mut values) = (0f64, 0usize);
    for batch in data.chunks(opts.batch.max(1)) {
        let utts: Vec<&PreparedUtterance> = batch.iter().collect();
        let crops: Vec<_> = utts
            .iter()
            .map(|p| p.mel.slice(ndarray::s![..p.mel.nrows().min(cfg.utt_max_frames), ..]))
            .collect();
        let u = model.utterance_embeddings(&crops)?;
        let spk: Vec<&[f32]> = utts.iter().map(|p| p.speaker_embedding.as_slice()).collect();
        let v = model.speaker_tensor(&spk)?;
        let layouts = vec![opts.layout(); utts.len()];
        let (h, x0, offsets, seqs) = teacher_forced_h(model, &utts, &layouts, &u, &v)?;

        let probs = tensor_to_f32(&model.decoder().stop_probability(&h)?)?.1;
        let labels: Vec<f32> = seqs.iter().flat_map(|s| s.stop_labels.iter().copied()).collect();
        for (p, l) in probs.iter().zip(&labels) {
            stop_hits += usize::from((*p > opts.generation.stop_threshold as f32) == (*l > 0.5));
            stop_total += 1;
        }

        let c = x0.dim(0)?;
        let dit = model.dit();
        let mut h_prev_rows = Vec::with_capacity(c);
        let mut prev_rows = Vec::with_capacity(c);
        for (p, &o) in utts.iter().zip(&offsets) {
            for k in 0..p.num_chunks() {
                if k == 0 {
                    h_prev_rows.push(dit.start_h().clone());
                    prev_rows.push(dit.start_chunk().clone());
                } else {
                    h_prev_rows.push(h.get(o + k - 1)?);
                    prev_rows.push(x0.get(o + k - 1)?);
                }
            }
        }
        let repeat = |x: &Tensor| -> Result<Tensor> {
            let rows: Vec<Tensor> = utts
                .iter()
                .enumerate()
                .flat_map(|(b, p)| std::iter::repeat_n(b, p.num_chunks()).map(move |_| x.get(b)))
                .collect::<candle_core::Result<_>>()?;
            Ok(Tensor::stack(&rows, 0)?)
        };
        let cond = ConditionSet::new(Tensor::stack(&h_prev_rows, 0)?, h.clone(), repeat(&v)?, repeat(&u)?)?;
        let prev = Tensor::stack(&prev_rows, 0)?;
        let times: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let eps: Vec<f32> = (0..c * n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = model.chunk_tensor(eps, c)?;
        let noisy = forward_diffuse_batch(&x0, &times, &eps)?;
        let t = Tensor::from_vec(times, c, x0.device())?.to_dtype(x0.dtype())?;
        let pred = dit.forward(&cond, &prev, &noisy, &t)?;
        let err = tensor_to_f32(&(pred - &x0)?.sqr()?)?.1;
        let valid: Vec<usize> = utts.iter().flat_map(|p| p.valid_frames.iter().copied()).collect();
        for (ci, &vf) in valid.iter().enumerate() {
            let base = ci * n * d;
            sq += err[base..base + vf * d].iter().map(|&e| e as f64).sum::<f64>();
            values += vf * d;
        }
    }
    let stop_acc = if stop_total == 0 { 1.0 } else { stop_hits as f64 / stop_total as f64 };
    let mse = if values == 0 { 0.0 } else { sq / values as f64 };
    Ok((stop_acc, mse))
}

/// Evaluates `model` on `eval_set`. Prompts are other utterances of the
/// same speaker drawn from the corpus.
pub fn evaluate(model: &Model, corpus: &Corpus, eval_set: &[Utterance], opts: &EvalOptions, label: &str, step: u64) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let pool = &corpus.utterances;
    let data = prepare(model, eval_set)?;
    let (stop_accuracy, diff_mse) = teacher_forced_metrics(model, &data, opts)?;

    let speaker = model.speaker_encoder();
    let (mut acc, mut ss, mut ss_x, mut len_ok, mut truncated) = (0f64, 0f64, 0f64, 0usize, 0usize);
    for batch in eval_set.chunks(opts.batch.max(1)) {
        let mut conds = Vec::with_capacity(batch.len());
        let mut prompts = Vec::with_capacity(batch.len());
        for u in batch {
            let prompt = partner(pool, u, true).unwrap_or(u);
            conds.push(Conditioning::from_prompt(model, prompt.tts_mel.view())?);
            prompts.push(prompt);
        }
        let texts: Vec<&[u32]> = batch.iter().map(|u| u.text.ids.as_slice()).collect();
        let out = generate_batch(model, &texts, conds, opts.layout(), &opts.generation)?;
        for ((u, prompt), g) in batch.iter().zip(&prompts).zip(&out) {
            acc += content_accuracy(&u.classes, &corpus.oracle_decode(g.mel.view()));
            let e = speaker.speaker_embed(g.mel.view())?;
            ss += cosine(&e, &speaker.speaker_embed(prompt.tts_mel.view())?) as f64;
            let cross = partner(pool, u, false).unwrap_or(u);
            ss_x += cosine(&e, &speaker.speaker_embed(cross.tts_mel.view())?) as f64;
            len_ok += usize::from(g.num_chunks == u.classes.len());
            truncated += usize::from(g.reason == StopReason::MaxChunks);
        }
    }
    let k = eval_set.len() as f64;
    Ok(EvalReport {
        label: label.to_string(),
        step,
        mode: opts.mode,
        utterances: eval_set.len(),
        content_accuracy: acc / k,
        ss_proxy: ss / k,
        ss_cross: ss_x / k,
        stop_accuracy,
        length_accuracy: len_ok as f64 / k,
        diff_mse,
        truncated,
        losses: None,
    })
}

/// Mean speaker cosine over same-speaker and cross-speaker pairs of
/// reference utterances.
pub fn reference_speaker_similarity(model: &Model, utterances: &[Utterance]) -> Result<(f64, f64)> {
    let enc = model.speaker_encoder();
    let embs = utterances
        .iter()
        .map(|u| enc.speaker_embed(u.tts_mel.view()))
        .collect::<Result<Vec<_>>>()?;
    let (mut same, mut ns, mut cross, mut nc) = (0f64, 0usize, 0f64, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let c = cosine(&embs[i], &embs[j]) as f64;
            if utterances[i].speaker == utterances[j].speaker {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    if ns == 0 || nc == 0 {
        return Err(Error::InvalidArgument("need same- and cross-speaker pairs".into()));
    }
    Ok((same / ns as f64, cross / nc as f64))
}

pub fn append_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
