//! n:m text/mel interleaving and the incremental generation loop.

mod engine;
pub mod interleave;
mod mixed;

pub use engine::{
    generate_batch, step_sessions, streaming_generate, BufferedSource, ChannelSink, ChannelSource, ChunkSink,
    Conditioning, Event, EventKind, EventLog, GenerationConfig, Generated, Need, Session, StopReason, TokenSource,
    VecSink,
};
pub use interleave::{interleave, loss_mask, InterleavePolicy, InterleavedSequence};
pub use mixed::mixed_batch;
