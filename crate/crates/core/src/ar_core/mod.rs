//! Autoregressive core: tokenizer, decoder input layout, the causal
//! transformer decoder with its stop head, and the utterance and speaker
//! encoders that feed its prefix.

pub mod decoder;
pub mod sequence;
pub mod speaker;
pub mod stop;
pub mod tokenizer;
pub mod utterance;

pub use decoder::{ArDecoder, DecoderDims, DecoderItem};
pub use sequence::{build_training_sequence, offline_layout, DecoderSequence, Element, Layout};
pub use speaker::{cosine, SpeakerEncoder};
pub use stop::{stop_loss, stop_loss_from_logits};
pub use tokenizer::{TextTokens, Tokenizer, FILLING, PAD, TURN_OF_SPEECH};
pub use utterance::{UtteranceDims, UtteranceEncoder};
