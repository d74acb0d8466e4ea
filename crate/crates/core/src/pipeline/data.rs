use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::corpus::Utterance;
use super::model::Model;
use crate::ar_core::TextTokens;
use crate::error::{Error, Result};

/// Per-band mean and standard deviation of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    pub fn fit<'a>(mels: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Self> {
        let views: Vec<_> = mels.into_iter().collect();
        if views.is_empty() {
            return Err(Error::EmptyInput("normalization corpus"));
        }
        let all = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch { expected: "equal band counts".into(), actual: e.to_string() })?;
        if all.nrows() == 0 {
            return Err(Error::EmptyInput("normalization corpus"));
        }
        let mean = all.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = all
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|s| s.max(1e-3))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, mel: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut out = mel.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, mel: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut out = mel.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// One training utterance in model space.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: usize,
    pub speaker: usize,
    pub text: TextTokens,
    pub classes: Vec<usize>,
    /// Normalized synthesis mel `[L, D_mel]`.
    pub mel: Array2<f32>,
    /// Normalized chunks flattened as `[C, N, D_mel]`.
    pub chunks: Vec<f32>,
    pub valid_frames: Vec<usize>,
    /// Frozen semantic target `[C * factor, d_asr]` with a per-row mask,
    /// `factor` being the ratio of the semantic rate to the decoder rate.
    pub asr_target: Array2<f32>,
    pub asr_mask: Vec<bool>,
    pub speaker_embedding: Vec<f32>,
}

impl PreparedUtterance {
    pub fn num_chunks(&self) -> usize {
        self.valid_frames.len()
    }
}

/// Converts raw corpus utterances into model inputs with the model's
/// normalization statistics and frozen encoders.
pub fn prepare(model: &Model, utterances: &[Utterance]) -> Result<Vec<PreparedUtterance>> {
    let cfg = model.config();
    let n = cfg.chunk_size;
    let d = cfg.tts_mel.n_mels;
    let factor = crate::align::TamConfig::from_rates(cfg.asr_rate(), cfg.decoder_rate(), 1, 1)?.upsample_factor;
    utterances
        .iter()
        .map(|u| {
            if u.tts_mel.ncols() != d {
                return Err(Error::ConfigMismatch {
                    field: "n_mels",
                    found: u.tts_mel.ncols().to_string(),
                    expected: d.to_string(),
                });
            }
            let mel = model.tts_stats().normalize(u.tts_mel.view());
            let spec = crate::features::MelSpectrogram::new(mel.clone(), cfg.tts_mel.frame_rate())?;
            let chunks = crate::features::chunk_mel(&spec, n)?;
            let c = chunks.len();
            let valid_frames = chunks.iter().map(|ch| ch.valid_frames).collect();
            let flat: Vec<f32> = chunks.iter().flat_map(|ch| ch.frames.iter().copied()).collect();
            let asr_in = model.asr_stats().normalize(u.asr_mel.view());
            let enc = model.asr_encoder().encode(asr_in.view())?;
            let rows = c * factor;
            if enc.nrows().abs_diff(rows) > n {
                return Err(Error::LengthMismatch(format!(
                    "utterance {}: {} semantic rows for {c} chunks",
                    u.id,
                    enc.nrows()
                )));
            }
            let mut asr_target = Array2::<f32>::zeros((rows, enc.ncols()));
            let keep = rows.min(enc.nrows());
            asr_target
                .slice_mut(ndarray::s![..keep, ..])
                .assign(&enc.slice(ndarray::s![..keep, ..]));
            let asr_mask = (0..rows).map(|r| r < keep).collect();
            let speaker_embedding = model.speaker_encoder().speaker_embed(u.tts_mel.view())?.to_vec();
            Ok(PreparedUtterance {
                id: u.id,
                speaker: u.speaker,
                text: u.text.clone(),
                classes: u.classes.clone(),
                mel,
                chunks: flat,
                valid_frames,
                asr_target,
                asr_mask,
                speaker_embedding,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trips() {
        let a = Array2::from_shape_fn((10, 4), |(t, b)| (t * 3 + b) as f32 * 0.1);
        let stats = NormStats::fit([a.view()]).unwrap();
        let n = stats.normalize(a.view());
        for col in n.columns() {
            assert!(col.mean().unwrap().abs() < 1e-5);
        }
        let back = stats.denormalize(n.view());
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
