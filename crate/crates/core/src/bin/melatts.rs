use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ndarray::Array2;

use melatts::ar_core::{Layout, Tokenizer};
use melatts::features::io::{read_mel_archive, read_wav, write_wav};
use melatts::features::{compute_mel, MelChunk};
use melatts::pipeline::*;
use melatts::streaming::{
    streaming_generate, ChannelSource, ChunkSink, GenerationConfig, InterleavePolicy, StopReason,
};

#[derive(Parser)]
#[command(name = "melatts", version, about = "Autoregressive + chunk-diffusion mel TTS on a toy corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; resumes from `<out>/checkpoint.bin` if present.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Save a checkpoint every this many steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: u64,
    },
    /// Offline synthesis to a WAV file.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Prompt speech: a `.wav` file or a mel archive.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        cfg: Option<f64>,
    },
    /// Streaming synthesis of text read line by line from stdin.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "offline")]
        mode: EvalMode,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 32)]
        utterances: usize,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Plot content error rate against training step.
    PlotConvergence {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoint.bin")
    } else {
        path.to_path_buf()
    }
}

fn load_prompt(model: &Model, path: &Path) -> anyhow::Result<Array2<f32>> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let mel = if is_wav {
        let (samples, rate) = read_wav(path)?;
        let cfg = &model.config().tts_mel;
        if rate != cfg.sample_rate {
            bail!("prompt is {rate} Hz, model expects {} Hz", cfg.sample_rate);
        }
        compute_mel(&samples, cfg)?.frames
    } else {
        read_mel_archive(path)?.0.frames
    };
    if mel.ncols() != model.config().tts_mel.n_mels {
        bail!("prompt has {} mel bands, model expects {}", mel.ncols(), model.config().tts_mel.n_mels);
    }
    Ok(mel)
}

fn generation(config: &TrainConfig, seed: u64, nfe: Option<usize>, cfg: Option<f64>) -> GenerationConfig {
    let mut g = GenerationConfig {
        sampler: config.sampler,
        ..Default::default()
    };
    g.sampler.seed = seed;
    if let Some(n) = nfe {
        g.sampler.nfe = n;
    }
    if let Some(a) = cfg {
        g.sampler.cfg_alpha = a;
    }
    g
}

/// Writes each chunk as its own WAV segment.
struct WavSegments {
    dir: PathBuf,
    model_rate: u32,
    config: melatts::features::MelConfig,
}

impl ChunkSink for WavSegments {
    fn emit(&mut self, chunk: &MelChunk) -> melatts::error::Result<()> {
        let spec = melatts::features::MelSpectrogram::new(chunk.frames.clone(), self.config.frame_rate())?;
        let wav = melatts::features::invert_mel(&spec, &self.config, GRIFFIN_LIM_ITERATIONS)?;
        write_wav(self.dir.join(format!("chunk_{:04}.wav", chunk.index)), &wav, self.model_rate)
    }

    fn finish(&mut self, reason: StopReason) -> melatts::error::Result<()> {
        if reason == StopReason::MaxChunks {
            log::warn!("stream truncated by the runaway guard");
        }
        Ok(())
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenCorpus { spec, out, seed } => {
            let spec: ToyCorpusSpec = match spec {
                Some(p) => serde_json::from_slice(&std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => ToyCorpusSpec::default(),
            };
            let corpus = generate_corpus(&spec, seed)?;
            write_corpus_dir(&corpus, &out)?;
            log::info!(
                "wrote {} utterances to {} (template margin {:.3})",
                corpus.utterances.len(),
                out.display(),
                corpus.template_margin()
            );
        }
        Command::Train {
            config,
            corpus,
            out,
            save_every,
        } => {
            let config: TrainConfig = match config {
                Some(p) => serde_json::from_slice(&std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            let config = config.with_env_seed()?;
            let corpus = load_corpus_dir(&corpus)?;
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("checkpoint.bin");
            let mut state = if ckpt.exists() {
                let s = load_checkpoint_with(&ckpt, Some(&config.model))?;
                if s.config != config {
                    bail!("{} was trained with a different config", ckpt.display());
                }
                log::info!("resuming from step {}", s.step);
                s
            } else {
                TrainState::new(config.clone(), fit_stats(&corpus.utterances)?)?
            };
            std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&config)?)?;
            let data = prepare(&state.model, &corpus.utterances)?;
            let eval_set: Vec<Utterance> = corpus.utterances.iter().take(config.eval_utterances).cloned().collect();
            let opts = EvalOptions {
                generation: generation(&config, config.seed, None, None),
                policy: config.policy,
                ..Default::default()
            };
            let losses_path = out.join("losses.jsonl");
            let reports_path = out.join("eval.jsonl");
            let mut losses_file = std::fs::OpenOptions::new().create(true).append(true).open(&losses_path)?;
            let mut pending: Option<melatts::error::Error> = None;
            let label = format!("align={}", serde_json::to_value(config.model.align_target)?.as_str().unwrap_or("?"));
            let every = if save_every == 0 { config.steps } else { save_every };
            while state.step < config.steps {
                let until = (state.step / every + 1) * every;
                train_run(&mut state, &data, Some((&corpus, &eval_set, &opts)), &label, until, |l, r| {
                    use std::io::Write;
                    if let Err(e) = writeln!(losses_file, "{}", serde_json::to_string(l).unwrap_or_default()) {
                        pending.get_or_insert(e.into());
                    }
                    if l.step % 100 == 0 {
                        log::info!("step {} diff {:.4} stop {:.4} align {:.4}", l.step, l.diff, l.stop, l.align);
                    }
                    if let Some(r) = r {
                        log::info!("step {} content {:.3} ss {:.3}", r.step, r.content_accuracy, r.ss_proxy);
                        if let Err(e) = append_report(&reports_path, r) {
                            pending.get_or_insert(e);
                        }
                    }
                })?;
                if let Some(e) = pending.take() {
                    return Err(e.into());
                }
                save_checkpoint(&state, &ckpt)?;
                log::info!("saved {} at step {}", ckpt.display(), state.step);
            }
        }
        Command::Synth {
            ckpt,
            text,
            prompt,
            seed,
            out,
            nfe,
            cfg,
        } => {
            let state = load_checkpoint(checkpoint_file(&ckpt))?;
            let tokens = Tokenizer::default().encode(&text)?;
            let prompt = load_prompt(&state.model, &prompt)?;
            let gen = generation(&state.config, seed, nfe, cfg);
            let s = synthesize_offline(&state.model, &tokens.ids, prompt.view(), &gen)?;
            write_wav(&out, &s.waveform, state.model.config().tts_mel.sample_rate)?;
            log::info!(
                "{} chunks ({:?}), wrote {}",
                s.generated.num_chunks,
                s.generated.reason,
                out.display()
            );
        }
        Command::Stream {
            ckpt,
            prompt,
            out_dir,
            seed,
            n,
            m,
        } => {
            let state = load_checkpoint(checkpoint_file(&ckpt))?;
            let model = &state.model;
            let prompt = load_prompt(model, &prompt)?;
            let cond = melatts::streaming::Conditioning::from_prompt(model, prompt.view())?;
            let policy = InterleavePolicy::new(n, m)?;
            std::fs::create_dir_all(&out_dir)?;
            let (tx, rx) = std::sync::mpsc::channel();
            std::thread::spawn(move || {
                let tok = Tokenizer::default();
                for line in std::io::stdin().lock().lines() {
                    let line = match line {
                        Ok(l) => l,
                        Err(e) => {
                            let _ = tx.send(Err(e.into()));
                            return;
                        }
                    };
                    for c in line.chars() {
                        let item = tok
                            .symbol_id(c)
                            .ok_or_else(|| melatts::error::Error::Source(format!("symbol {c:?} not in alphabet")));
                        if tx.send(item).is_err() {
                            return;
                        }
                    }
                }
            });
            let mut source = ChannelSource::new(rx);
            let mut sink = WavSegments {
                dir: out_dir.clone(),
                model_rate: model.config().tts_mel.sample_rate,
                config: model.config().tts_mel.clone(),
            };
            let gen = generation(&state.config, seed, None, None);
            let g = streaming_generate(model, &mut source, &mut sink, cond, Layout::Interleaved(policy), &gen)?;
            std::fs::write(out_dir.join("events.jsonl"), g.log.to_jsonl()?)?;
            g.log.check_latency_contract(policy)?;
            log::info!("{} chunks ({:?})", g.num_chunks, g.reason);
        }
        Command::Eval {
            ckpt,
            corpus,
            mode,
            report,
            utterances,
            label,
        } => {
            let state = load_checkpoint(checkpoint_file(&ckpt))?;
            let corpus = load_corpus_dir(&corpus)?;
            let set: Vec<Utterance> = corpus.utterances.iter().take(utterances).cloned().collect();
            let opts = EvalOptions {
                mode,
                policy: state.config.policy,
                generation: generation(&state.config, state.config.seed, None, None),
                ..Default::default()
            };
            let r = evaluate(&state.model, &corpus, &set, &opts, &label, state.step)?;
            append_report(&report, &r)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::PlotConvergence { reports, out } => {
            let mut all = Vec::new();
            for p in &reports {
                all.extend(read_reports(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let csv = plot_convergence(&all, &out)?;
            log::info!("wrote {} and {}", out.display(), csv.display());
        }
    }
    Ok(())
}
