use ndarray::ArrayView2;

use super::model::Model;
use crate::ar_core::Layout;
use crate::error::Result;
use crate::features::{invert_mel, MelSpectrogram};
use crate::streaming::{generate_batch, Conditioning, GenerationConfig, Generated, StopReason};

/// Griffin-Lim iterations used for audible output.
pub const GRIFFIN_LIM_ITERATIONS: usize = 32;

/// Offline synthesis output.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub generated: Generated,
    pub waveform: Vec<f32>,
}

/// Offline-layout synthesis: `u` and `v` come from the prompt's raw log-mel
/// frames, chunks are sampled one by one until the stop head fires. A
/// truncated run is flagged by `reason == StopReason::MaxChunks`.
pub fn generate_offline(model: &Model, text: &[u32], prompt: ArrayView2<'_, f32>, gen: &GenerationConfig) -> Result<Generated> {
    let cond = Conditioning::from_prompt(model, prompt)?;
    let mut out = generate_batch(model, &[text], vec![cond], Layout::Offline, gen)?;
    let g = out.pop().expect("one session");
    if g.reason == StopReason::MaxChunks {
        log::warn!("runaway guard truncated generation at {} chunks", g.num_chunks);
    } else {
        log::info!("generated {} chunks before the stop head fired", g.num_chunks);
    }
    Ok(g)
}

/// `generate_offline` followed by Griffin-Lim inversion.
pub fn synthesize_offline(model: &Model, text: &[u32], prompt: ArrayView2<'_, f32>, gen: &GenerationConfig) -> Result<Synthesis> {
    let generated = generate_offline(model, text, prompt, gen)?;
    let waveform = to_waveform(model, generated.mel.view())?;
    Ok(Synthesis { generated, waveform })
}

pub fn to_waveform(model: &Model, mel: ArrayView2<'_, f32>) -> Result<Vec<f32>> {
    let cfg = &model.config().tts_mel;
    let spec = MelSpectrogram::new(mel.to_owned(), cfg.frame_rate())?;
    invert_mel(&spec, cfg, GRIFFIN_LIM_ITERATIONS)
}
