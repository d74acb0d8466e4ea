use candle_core::{DType, Tensor};
use ndarray::ArrayView2;

use super::config::ModelConfig;
use super::data::NormStats;
use crate::align::{AlignTarget, SurrogateAsrDims, SurrogateAsrEncoder, Tam, TamConfig};
use crate::ar_core::{ArDecoder, DecoderDims, SpeakerEncoder, UtteranceDims, UtteranceEncoder};
use crate::diffusion::{Dit, DitDims};
use crate::error::Result;
use crate::nn::{Init, ParamStore};

/// Every network of the system: trainable decoder, DiT, utterance encoder
/// and alignment head, plus the frozen speaker and ASR encoders and the
/// normalization statistics.
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) decoder: ArDecoder,
    pub(crate) dit: Dit,
    pub(crate) utterance: UtteranceEncoder,
    pub(crate) constant_u: Tensor,
    pub(crate) tam: Option<Tam>,
    pub(crate) speaker: SpeakerEncoder,
    pub(crate) asr: SurrogateAsrEncoder,
    pub(crate) tts_stats: NormStats,
    pub(crate) asr_stats: NormStats,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let c = &config;
        let decoder = ArDecoder::new(
            &mut ps,
            DecoderDims {
                vocab_size: c.vocab_size,
                chunk_size: c.chunk_size,
                n_mels: c.tts_mel.n_mels,
                d_model: c.d_model,
                layers: c.decoder_layers,
                heads: c.decoder_heads,
                max_positions: c.max_positions,
                d_spk: c.d_spk,
                d_utt: c.d_utt,
            },
        )?;
        let dit = Dit::new(
            &mut ps,
            DitDims {
                n_mels: c.tts_mel.n_mels,
                chunk_size: c.chunk_size,
                width: c.dit_width,
                layers: c.dit_layers,
                heads: c.dit_heads,
                d_h: c.d_model,
                d_spk: c.d_spk,
                d_utt: c.d_utt,
            },
        )?;
        let utterance = UtteranceEncoder::new(
            &mut ps,
            UtteranceDims {
                n_mels: c.tts_mel.n_mels,
                width: c.utt_width,
                heads: c.utt_heads,
                layers: c.utt_layers,
                max_frames: c.utt_max_frames,
                d_utt: c.d_utt,
            },
        )?;
        let constant_u = ps.param("utt.constant", &[c.d_utt], Init::Normal(0.02))?;
        let tam = match c.align_target {
            AlignTarget::Asr => Some(Tam::new(
                &mut ps,
                "tam",
                TamConfig::from_rates(c.asr_rate(), c.decoder_rate(), c.d_model, c.d_asr)?,
            )?),
            AlignTarget::Mel => Some(Tam::new(
                &mut ps,
                "tam",
                TamConfig::from_rates(c.tts_mel.frame_rate(), c.decoder_rate(), c.d_model, c.tts_mel.n_mels)?,
            )?),
            AlignTarget::None => None,
        };
        let speaker = SpeakerEncoder::new(c.tts_mel.n_mels, c.d_spk, c.frozen_seed)?;
        let asr = SurrogateAsrEncoder::new(
            SurrogateAsrDims {
                n_mels: c.asr_mel.n_mels,
                channels: c.asr_channels,
                d_out: c.d_asr,
                heads: c.asr_heads,
                max_rows: c.asr_max_rows,
            },
            c.frozen_seed.wrapping_add(1),
        )?;
        let tts_stats = NormStats::identity(c.tts_mel.n_mels);
        let asr_stats = NormStats::identity(c.asr_mel.n_mels);
        Ok(Self {
            config,
            params: ps,
            decoder,
            dit,
            utterance,
            constant_u,
            tam,
            speaker,
            asr,
            tts_stats,
            asr_stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn decoder(&self) -> &ArDecoder {
        &self.decoder
    }

    pub fn dit(&self) -> &Dit {
        &self.dit
    }

    pub fn tam(&self) -> Option<&Tam> {
        self.tam.as_ref()
    }

    pub fn speaker_encoder(&self) -> &SpeakerEncoder {
        &self.speaker
    }

    pub fn asr_encoder(&self) -> &SurrogateAsrEncoder {
        &self.asr
    }

    pub fn tts_stats(&self) -> &NormStats {
        &self.tts_stats
    }

    pub fn asr_stats(&self) -> &NormStats {
        &self.asr_stats
    }

    pub fn set_stats(&mut self, tts: NormStats, asr: NormStats) {
        self.tts_stats = tts;
        self.asr_stats = asr;
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Utterance embeddings `[b, d_utt]` for normalized mel crops, or the
    /// learned constant when the encoder is disabled.
    pub fn utterance_embeddings(&self, crops: &[ArrayView2<'_, f32>]) -> Result<Tensor> {
        if self.config.use_utterance_embedding {
            self.utterance.encode_batch(crops)
        } else {
            Ok(self
                .constant_u
                .unsqueeze(0)?
                .broadcast_as((crops.len(), self.config.d_utt))?
                .contiguous()?)
        }
    }

    /// Speaker embeddings as a `[b, d_spk]` tensor.
    pub fn speaker_tensor(&self, embeddings: &[&[f32]]) -> Result<Tensor> {
        let flat: Vec<f32> = embeddings.iter().flat_map(|e| e.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (embeddings.len(), self.config.d_spk), self.params.device())?.to_dtype(self.dtype())?)
    }

    /// Flattened `[c, N, D_mel]` chunk values as a tensor.
    pub fn chunk_tensor(&self, flat: Vec<f32>, count: usize) -> Result<Tensor> {
        Ok(Tensor::from_vec(flat, (count, self.config.chunk_size, self.config.tts_mel.n_mels), self.params.device())?
            .to_dtype(self.dtype())?)
    }
}
