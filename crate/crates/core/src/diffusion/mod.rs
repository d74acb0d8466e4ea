//! Chunk-level diffusion: variance-preserving schedule, the DiT denoiser,
//! guided DDIM sampling and the training loss.

pub mod dit;
pub mod loss;
pub mod sampler;
pub mod schedule;

pub use dit::{upsample_conditions, ConditionSet, Dit, DitDims};
pub use loss::diffusion_loss;
pub use sampler::{cfg_predict, sample_chunk};
pub use schedule::{
    chunk_noise, ddim_step, forward_diffuse, forward_diffuse_batch, vp_schedule, DiffusionState, SamplerConfig,
};
