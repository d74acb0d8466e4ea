use serde::{Deserialize, Serialize};

use crate::align::AlignTarget;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::features::MelConfig;
use crate::nn::AdamWConfig;
use crate::streaming::InterleavePolicy;

/// Network sizes and front-end settings; everything a checkpoint needs to
/// rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tts_mel: MelConfig,
    pub asr_mel: MelConfig,
    pub chunk_size: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_positions: usize,
    pub dit_width: usize,
    pub dit_layers: usize,
    pub dit_heads: usize,
    pub d_spk: usize,
    pub d_utt: usize,
    pub utt_width: usize,
    pub utt_layers: usize,
    pub utt_heads: usize,
    pub utt_max_frames: usize,
    pub asr_channels: usize,
    pub d_asr: usize,
    pub asr_heads: usize,
    pub asr_max_rows: usize,
    /// When false, `u` is a learned constant instead of an encoder output.
    pub use_utterance_embedding: bool,
    pub align_target: AlignTarget,
    /// Seed of the frozen speaker and ASR encoders.
    pub frozen_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tts_mel: MelConfig::tts(),
            asr_mel: MelConfig::asr(),
            chunk_size: 8,
            vocab_size: crate::ar_core::Tokenizer::default().vocab_size(),
            d_model: 128,
            decoder_layers: 4,
            decoder_heads: 4,
            max_positions: 128,
            dit_width: 128,
            dit_layers: 4,
            dit_heads: 4,
            d_spk: 64,
            d_utt: 32,
            utt_width: 64,
            utt_layers: 1,
            utt_heads: 4,
            utt_max_frames: 64,
            asr_channels: 64,
            d_asr: 64,
            asr_heads: 4,
            asr_max_rows: 256,
            use_utterance_embedding: true,
            align_target: AlignTarget::Asr,
            frozen_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    /// A reduced model for single-core runs.
    pub fn small() -> Self {
        Self {
            d_model: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            max_positions: 64,
            dit_width: 64,
            dit_layers: 2,
            dit_heads: 4,
            d_spk: 32,
            d_utt: 16,
            utt_width: 32,
            utt_layers: 1,
            utt_heads: 2,
            utt_max_frames: 48,
            asr_channels: 64,
            d_asr: 64,
            asr_heads: 4,
            asr_max_rows: 128,
            ..Self::default()
        }
    }

    /// Decoder steps per second.
    pub fn decoder_rate(&self) -> f64 {
        self.tts_mel.frame_rate() / self.chunk_size as f64
    }

    /// Frame rate of the surrogate ASR output (input rate / 4).
    pub fn asr_rate(&self) -> f64 {
        self.asr_mel.frame_rate() / 4.0
    }

    pub fn validate(&self) -> Result<()> {
        self.tts_mel.validate()?;
        self.asr_mel.validate()?;
        let checks = [
            (self.chunk_size >= 1, "chunk_size >= 1"),
            (self.d_model % self.decoder_heads == 0, "d_model divisible by decoder_heads"),
            (self.dit_width % self.dit_heads == 0, "dit_width divisible by dit_heads"),
            (self.utt_width % self.utt_heads == 0, "utt_width divisible by utt_heads"),
            (self.asr_channels % self.asr_heads == 0, "asr_channels divisible by asr_heads"),
            (self.vocab_size > 3, "vocab_size > 3"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::InvalidArgument(format!("model config requires {what}")));
            }
        }
        Ok(())
    }
}

/// A full training run; reproducible from this plus the corpus seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub interleave_fraction: f64,
    pub policy: InterleavePolicy,
    pub condition_dropout: f64,
    pub crop_min_frames: usize,
    pub crop_max_frames: usize,
    pub sampler: SamplerConfig,
    pub eval_every: u64,
    pub eval_utterances: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            steps: 2000,
            learning_rate: 3e-4,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            interleave_fraction: 0.5,
            policy: InterleavePolicy::default(),
            condition_dropout: 0.2,
            crop_min_frames: 16,
            crop_max_frames: 48,
            sampler: SamplerConfig::default(),
            eval_every: 0,
            eval_utterances: 32,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate()?;
        self.sampler.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.interleave_fraction) {
            return Err(Error::InvalidArgument("interleave_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::InvalidArgument("condition_dropout must lie in [0, 1]".into()));
        }
        if self.crop_min_frames == 0 || self.crop_min_frames > self.crop_max_frames {
            return Err(Error::InvalidArgument("crop bounds are invalid".into()));
        }
        if self.crop_max_frames > self.model.utt_max_frames {
            return Err(Error::InvalidArgument(format!(
                "crop_max_frames {} exceeds the utterance encoder's {} positions",
                self.crop_max_frames, self.model.utt_max_frames
            )));
        }
        Ok(())
    }

    /// Applies `MELATTS_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var("MELATTS_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("MELATTS_SEED={s:?} is not an integer")))?;
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_close() {
        let m = ModelConfig::default();
        assert_eq!(m.decoder_rate(), 6.25);
        assert_eq!(m.asr_rate(), 25.0);
        assert_eq!(m.asr_rate() / m.decoder_rate(), 4.0);
        assert_eq!(m.tts_mel.frame_rate() / m.decoder_rate(), 8.0);
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
        ModelConfig::small().validate().unwrap();
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let c = TrainConfig { interleave_fraction: 1.5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { crop_min_frames: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
