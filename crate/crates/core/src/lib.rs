//! Autoregressive continuous-mel text-to-speech.
//!
//! A causal transformer decoder emits one continuous conditioning vector per
//! mel chunk; a diffusion transformer denoises each chunk given that vector,
//! the previous clean chunk and speaker / utterance embeddings. Training adds
//! a representation-alignment term that pulls the decoder output toward a
//! frozen semantic encoder, and an n:m text/mel interleave enables streaming.

pub mod error;
pub mod features;
pub mod nn;
pub mod ar_core;
pub mod streaming;
pub mod diffusion;
pub mod align;
pub mod pipeline;

pub use error::{Error, Result};
