use std::collections::VecDeque;
use std::sync::mpsc::{Receiver, SyncSender};
use std::time::Instant;

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::interleave::InterleavePolicy;
use crate::ar_core::{ArDecoder, DecoderItem, DecoderSequence, Element, Layout};
use crate::diffusion::{chunk_noise, sample_chunk, ConditionSet, SamplerConfig};
use crate::error::{Error, Result};
use crate::features::MelChunk;
use crate::nn::tensor_to_f32;
use crate::pipeline::Model;

/// Incremental text input. `Ok(None)` is the end marker.
pub trait TokenSource {
    fn next_token(&mut self) -> Result<Option<u32>>;
}

/// Incremental chunk output. A blocking `emit` pauses generation.
pub trait ChunkSink {
    fn emit(&mut self, chunk: &MelChunk) -> Result<()>;

    /// Called once when generation ends.
    fn finish(&mut self, _reason: StopReason) -> Result<()> {
        Ok(())
    }
}

/// A source that has every token up front.
#[derive(Debug, Clone)]
pub struct BufferedSource {
    tokens: VecDeque<u32>,
}

impl BufferedSource {
    pub fn new(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.iter().copied().collect(),
        }
    }
}

impl TokenSource for BufferedSource {
    fn next_token(&mut self) -> Result<Option<u32>> {
        Ok(self.tokens.pop_front())
    }
}

/// Tokens arriving over a channel; a closed channel ends the text.
pub struct ChannelSource {
    rx: Receiver<Result<u32>>,
}

impl ChannelSource {
    pub fn new(rx: Receiver<Result<u32>>) -> Self {
        Self { rx }
    }
}

impl TokenSource for ChannelSource {
    fn next_token(&mut self) -> Result<Option<u32>> {
        match self.rx.recv() {
            Ok(Ok(t)) => Ok(Some(t)),
            Ok(Err(e)) => Err(e),
            Err(_) => Ok(None),
        }
    }
}

impl<F: FnMut() -> Result<Option<u32>>> TokenSource for F {
    fn next_token(&mut self) -> Result<Option<u32>> {
        self()
    }
}

/// Collects chunks in memory.
#[derive(Debug, Default, Clone)]
pub struct VecSink {
    pub chunks: Vec<MelChunk>,
    pub reason: Option<StopReason>,
}

impl ChunkSink for VecSink {
    fn emit(&mut self, chunk: &MelChunk) -> Result<()> {
        self.chunks.push(chunk.clone());
        Ok(())
    }

    fn finish(&mut self, reason: StopReason) -> Result<()> {
        self.reason = Some(reason);
        Ok(())
    }
}

/// Forwards chunks over a bounded channel.
pub struct ChannelSink {
    tx: SyncSender<MelChunk>,
}

impl ChannelSink {
    pub fn new(tx: SyncSender<MelChunk>) -> Self {
        Self { tx }
    }
}

impl ChunkSink for ChannelSink {
    fn emit(&mut self, chunk: &MelChunk) -> Result<()> {
        self.tx.send(chunk.clone()).map_err(|_| Error::SinkClosed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The stop head fired.
    Stop,
    /// The runaway guard truncated generation.
    MaxChunks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    TokenReceived { token: u32, count: usize },
    EndOfText { count: usize },
    Tos,
    ChunkEmitted { index: usize, block: usize, tokens_seen: usize, text_ended: bool },
    Stop { reason: StopReason, chunks: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub micros: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
    #[serde(skip)]
    start: Option<Instant>,
}

impl EventLog {
    pub fn push(&mut self, kind: EventKind) {
        let start = *self.start.get_or_insert_with(Instant::now);
        self.events.push(Event {
            seq: self.events.len(),
            micros: start.elapsed().as_micros() as u64,
            kind,
        });
    }

    pub fn chunk_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::ChunkEmitted { .. }))
            .count()
    }

    /// Checks that no chunk of block `k` (1-based, `m` chunks per block)
    /// precedes the `n*k`-th token or the end marker. Counts come from the
    /// event order; the fields recorded on each chunk must agree with them.
    pub fn check_latency_contract(&self, policy: InterleavePolicy) -> Result<()> {
        let (mut received, mut ended, mut chunks) = (0usize, false, 0usize);
        for e in &self.events {
            match e.kind {
                EventKind::TokenReceived { .. } => received += 1,
                EventKind::EndOfText { .. } => ended = true,
                EventKind::ChunkEmitted {
                    index,
                    block,
                    tokens_seen,
                    text_ended,
                } => {
                    if index != chunks || tokens_seen != received || text_ended != ended {
                        return Err(Error::InvalidArgument(format!(
                            "chunk {index} records state that disagrees with the event order"
                        )));
                    }
                    let k = index / policy.m + 1;
                    if !ended && (received < policy.n * k || block != k) {
                        return Err(Error::InvalidArgument(format!(
                            "chunk {index} of block {k} emitted after only {received} tokens"
                        )));
                    }
                    chunks += 1;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Prompt-side conditioning: `u: [d_utt]`, `v: [d_spk]`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub u: Tensor,
    pub v: Tensor,
}

impl Conditioning {
    /// Derives `u` and `v` from a prompt's raw log-mel frames.
    pub fn from_prompt(model: &Model, prompt: ndarray::ArrayView2<'_, f32>) -> Result<Self> {
        if prompt.nrows() == 0 {
            return Err(Error::EmptyInput("prompt"));
        }
        let normalized = model.tts_stats().normalize(prompt);
        let max = model.config().utt_max_frames;
        let crop = normalized.slice(ndarray::s![..prompt.nrows().min(max), ..]);
        let u = model.utterance_embeddings(&[crop])?.squeeze(0)?;
        let spk = model.speaker_encoder().speaker_embed(prompt)?;
        let v = model.speaker_tensor(&[spk.as_slice().expect("contiguous")])?.squeeze(0)?;
        Ok(Self { u, v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub sampler: SamplerConfig,
    pub stop_threshold: f64,
    /// Chunks allowed per text token before the runaway guard fires.
    pub max_chunks_per_token: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            stop_threshold: 0.5,
            max_chunks_per_token: 4,
        }
    }
}

impl GenerationConfig {
    pub fn max_chunks(&self, text_len: usize) -> usize {
        self.max_chunks_per_token * text_len.max(1)
    }
}

/// What a session needs next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Token,
    Chunk,
    Done,
}

/// Incremental state of one utterance.
///
/// Interleaved sessions hold one token of lookahead: a block of `n` is
/// committed only once token `n + 1` or the end marker arrives, so the
/// turn-of-speech token can follow the final text token directly.
pub struct Session {
    layout: Layout,
    cond: Conditioning,
    elements: Vec<Element>,
    pending: VecDeque<u32>,
    text_ended: bool,
    tokens_seen: usize,
    tos_emitted: bool,
    block_left: usize,
    block: usize,
    /// Normalized chunks `[N * D]` in order.
    chunks: Vec<Vec<f32>>,
    h_prev: Option<Tensor>,
    max_chunks: Option<usize>,
    finished: Option<StopReason>,
    pub log: EventLog,
}

impl Session {
    pub fn new(layout: Layout, cond: Conditioning) -> Result<Self> {
        if let Layout::Interleaved(p) = layout {
            p.validate()?;
        }
        Ok(Self {
            layout,
            cond,
            elements: vec![Element::Utt, Element::Spk],
            pending: VecDeque::new(),
            text_ended: false,
            tokens_seen: 0,
            tos_emitted: false,
            block_left: 0,
            block: 0,
            chunks: Vec::new(),
            h_prev: None,
            max_chunks: None,
            finished: None,
            log: EventLog::default(),
        })
    }

    pub fn push_token(&mut self, token: u32) -> Result<()> {
        if self.text_ended {
            return Err(Error::InvalidArgument("token after end of text".into()));
        }
        self.tokens_seen += 1;
        self.pending.push_back(token);
        self.log.push(EventKind::TokenReceived {
            token,
            count: self.tokens_seen,
        });
        Ok(())
    }

    pub fn end_text(&mut self) {
        if !self.text_ended {
            self.text_ended = true;
            self.log.push(EventKind::EndOfText { count: self.tokens_seen });
        }
    }

    pub fn sequence(&self) -> DecoderSequence {
        DecoderSequence::from_elements(self.elements.clone())
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.finished
    }

    fn commit_text(&mut self, k: usize) {
        for t in self.pending.drain(..k) {
            self.elements.push(Element::Text(t));
        }
    }

    fn commit_tos(&mut self, gen: &GenerationConfig) {
        self.commit_text(self.pending.len());
        self.elements.push(Element::TurnOfSpeech);
        self.tos_emitted = true;
        self.max_chunks = Some(gen.max_chunks(self.tokens_seen));
        self.log.push(EventKind::Tos);
    }

    /// Advances the layout as far as buffered input allows.
    pub fn need(&mut self, gen: &GenerationConfig) -> Need {
        if self.finished.is_some() {
            return Need::Done;
        }
        if self.tos_emitted {
            return Need::Chunk;
        }
        match self.layout {
            Layout::Offline => {
                if !self.text_ended {
                    return Need::Token;
                }
                self.block = 1;
                self.commit_tos(gen);
                Need::Chunk
            }
            Layout::Interleaved(p) => {
                if self.block_left > 0 {
                    return Need::Chunk;
                }
                if self.pending.len() > p.n {
                    self.commit_text(p.n);
                    self.block += 1;
                    self.block_left = p.m;
                    Need::Chunk
                } else if self.text_ended {
                    self.block += 1;
                    self.commit_tos(gen);
                    Need::Chunk
                } else {
                    Need::Token
                }
            }
        }
    }

    fn accept(&mut self, model: &Model, chunk: Vec<f32>, h: Tensor, stop_p: f64, gen: &GenerationConfig, sink: &mut dyn ChunkSink) -> Result<()> {
        let index = self.chunks.len();
        let n = model.config().chunk_size;
        let d = model.config().tts_mel.n_mels;
        let frames = Array2::from_shape_vec((n, d), chunk.clone()).expect("chunk shape");
        let frames = model.tts_stats().denormalize(frames.view());
        self.elements.push(Element::Chunk(index));
        self.chunks.push(chunk);
        self.h_prev = Some(h);
        self.block_left = self.block_left.saturating_sub(1);
        self.log.push(EventKind::ChunkEmitted {
            index,
            block: self.block,
            tokens_seen: self.tokens_seen,
            text_ended: self.text_ended,
        });
        sink.emit(&MelChunk {
            frames,
            index,
            valid_frames: n,
        })?;
        let reason = if stop_p > gen.stop_threshold {
            Some(StopReason::Stop)
        } else if self.max_chunks.is_some_and(|m| self.chunks.len() >= m) {
            Some(StopReason::MaxChunks)
        } else {
            None
        };
        if let Some(reason) = reason {
            self.finished = Some(reason);
            self.log.push(EventKind::Stop {
                reason,
                chunks: self.chunks.len(),
            });
            sink.finish(reason)?;
        }
        Ok(())
    }
}

/// Generates one chunk for every listed session in a single batched
/// decoder pass and a single batched sampling run.
pub fn step_sessions(
    model: &Model,
    sessions: &mut [&mut Session],
    sinks: &mut [&mut dyn ChunkSink],
    gen: &GenerationConfig,
) -> Result<()> {
    if sessions.is_empty() {
        return Ok(());
    }
    let cfg = model.config();
    let (n, d) = (cfg.chunk_size, cfg.tts_mel.n_mels);
    let limit = cfg.max_positions;
    for s in sessions.iter() {
        if s.elements.len() >= limit {
            return Err(Error::Runaway { max_chunks: s.chunks.len() });
        }
    }
    let seqs: Vec<DecoderSequence> = sessions.iter().map(|s| s.sequence()).collect();
    let mut offsets = Vec::with_capacity(sessions.len());
    let mut flat = Vec::new();
    for s in sessions.iter() {
        offsets.push(flat.len() / (n * d));
        for c in &s.chunks {
            flat.extend_from_slice(c);
        }
    }
    let total = flat.len() / (n * d);
    let history = model.chunk_tensor(flat, total)?;
    let items: Vec<DecoderItem<'_>> = seqs
        .iter()
        .zip(&offsets)
        .map(|(seq, &chunk_offset)| DecoderItem { seq, chunk_offset })
        .collect();
    let u = Tensor::stack(&sessions.iter().map(|s| &s.cond.u).collect::<Vec<_>>(), 0)?;
    let v = Tensor::stack(&sessions.iter().map(|s| &s.cond.v).collect::<Vec<_>>(), 0)?;
    let hidden = model.decoder().hidden_states(&items, &u, &v, &history)?;
    let at: Vec<(usize, usize)> = seqs.iter().enumerate().map(|(b, s)| (b, s.len() - 1)).collect();
    let h = ArDecoder::gather(&hidden, &at)?;
    let stop_p = tensor_to_f32(&model.decoder().stop_probability(&h)?)?.1;

    let dit = model.dit();
    let h_prev: Vec<Tensor> = sessions
        .iter()
        .map(|s| s.h_prev.clone().unwrap_or_else(|| dit.start_h().clone()))
        .collect();
    let h_prev = Tensor::stack(&h_prev, 0)?;
    let start = tensor_to_f32(dit.start_chunk())?.1;
    let mut prev = Vec::with_capacity(sessions.len() * n * d);
    let mut noise = Vec::with_capacity(sessions.len() * n * d);
    for s in sessions.iter() {
        prev.extend_from_slice(s.chunks.last().unwrap_or(&start));
        noise.extend(chunk_noise(gen.sampler.seed, s.chunks.len(), n * d));
    }
    let b = sessions.len();
    let prev = model.chunk_tensor(prev, b)?;
    let noise = model.chunk_tensor(noise, b)?;
    let cond = ConditionSet::new(h_prev, h.clone(), v, u)?;
    let x = sample_chunk(dit, &cond, &prev, &noise, &gen.sampler)?;
    let x = tensor_to_f32(&x.reshape((b, n * d))?)?.1;

    for (i, (s, sink)) in sessions.iter_mut().zip(sinks.iter_mut()).enumerate() {
        let chunk = x[i * n * d..(i + 1) * n * d].to_vec();
        s.accept(model, chunk, h.get(i)?, stop_p[i] as f64, gen, &mut **sink)?;
    }
    Ok(())
}

/// Summary of a finished generation.
#[derive(Debug, Clone)]
pub struct Generated {
    /// Denormalized log-mel frames `[chunks * N, D_mel]`.
    pub mel: Array2<f32>,
    pub num_chunks: usize,
    pub reason: StopReason,
    pub log: EventLog,
}

fn finish_session(model: &Model, s: Session) -> Generated {
    let n = model.config().chunk_size;
    let d = model.config().tts_mel.n_mels;
    let flat: Vec<f32> = s.chunks.iter().flatten().copied().collect();
    let mel = Array2::from_shape_vec((s.chunks.len() * n, d), flat).expect("chunk shape");
    Generated {
        mel: model.tts_stats().denormalize(mel.view()),
        num_chunks: s.chunks.len(),
        reason: s.finished.unwrap_or(StopReason::MaxChunks),
        log: s.log,
    }
}

/// Streams chunks to `sink` as tokens arrive from `source`.
pub fn streaming_generate(
    model: &Model,
    source: &mut dyn TokenSource,
    sink: &mut dyn ChunkSink,
    cond: Conditioning,
    layout: Layout,
    gen: &GenerationConfig,
) -> Result<Generated> {
    gen.sampler.validate()?;
    let mut session = Session::new(layout, cond)?;
    loop {
        match session.need(gen) {
            Need::Done => break,
            Need::Token => match source.next_token()? {
                Some(t) => session.push_token(t)?,
                None => session.end_text(),
            },
            Need::Chunk => step_sessions(model, &mut [&mut session], &mut [sink], gen)?,
        }
    }
    Ok(finish_session(model, session))
}

/// Generates a batch of fully buffered utterances in lockstep.
pub fn generate_batch(
    model: &Model,
    texts: &[&[u32]],
    conds: Vec<Conditioning>,
    layout: Layout,
    gen: &GenerationConfig,
) -> Result<Vec<Generated>> {
    if texts.len() != conds.len() {
        return Err(Error::LengthMismatch(format!("{} texts for {} prompts", texts.len(), conds.len())));
    }
    gen.sampler.validate()?;
    let mut sessions = conds
        .into_iter()
        .zip(texts)
        .map(|(c, text)| {
            let mut s = Session::new(layout, c)?;
            for &t in *text {
                s.push_token(t)?;
            }
            s.end_text();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sinks: Vec<VecSink> = vec![VecSink::default(); sessions.len()];
    loop {
        let mut active = Vec::new();
        for (i, s) in sessions.iter_mut().enumerate() {
            if s.need(gen) == Need::Chunk {
                active.push(i);
            }
        }
        if active.is_empty() {
            break;
        }
        let mut ss: Vec<&mut Session> = Vec::new();
        let mut ks: Vec<&mut dyn ChunkSink> = Vec::new();
        for (i, (s, k)) in sessions.iter_mut().zip(sinks.iter_mut()).enumerate() {
            if active.contains(&i) {
                ss.push(s);
                ks.push(k);
            }
        }
        step_sessions(model, &mut ss, &mut ks, gen)?;
    }
    Ok(sessions.into_iter().map(|s| finish_session(model, s)).collect())
}
