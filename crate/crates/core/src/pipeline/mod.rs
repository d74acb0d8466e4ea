//! Training, synthetic corpus, synthesis, evaluation, checkpoints and
//! plotting.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod eval;
pub mod model;
pub mod plot;
pub mod run;
pub mod store;
pub mod synth;
pub mod train;

pub use config::{ModelConfig, TrainConfig};
pub use corpus::{content_accuracy, generate_corpus, Corpus, ToyCorpusSpec, Utterance};
pub use data::{prepare, NormStats, PreparedUtterance};
pub use model::Model;
pub use train::{compute_losses, fit_stats, plan_batch, scalar, train_step, BatchPlan, LossBreakdown, Losses, TrainState};
pub use eval::{append_report, evaluate, read_reports, reference_speaker_similarity, EvalMode, EvalOptions, EvalReport};
pub use synth::{generate_offline, synthesize_offline, to_waveform, Synthesis, GRIFFIN_LIM_ITERATIONS};
pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint, SCHEMA_VERSION};
pub use plot::{csv_path, plot_convergence};
pub use run::{train_run, RunOutput};
pub use store::{load_corpus_dir, write_corpus_dir, ManifestEntry};
