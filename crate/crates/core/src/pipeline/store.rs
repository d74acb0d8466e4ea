use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{generate_corpus, Corpus, ToyCorpusSpec};
use crate::error::{Error, Result};
use crate::features::io::write_mel_archive;
use crate::features::{MelConfig, MelSpectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusDescriptor {
    spec: ToyCorpusSpec,
    seed: u64,
    utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub speaker: usize,
    pub text: String,
    pub classes: Vec<usize>,
    pub tts_mel: String,
    pub asr_mel: String,
}

/// Writes `corpus.json`, `manifest.jsonl` and one mel archive per grid and
/// utterance under `dir`.
pub fn write_corpus_dir(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("mels"))?;
    let desc = CorpusDescriptor {
        spec: corpus.spec.clone(),
        seed: corpus.seed,
        utterances: corpus.utterances.len(),
    };
    std::fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&desc)?)?;
    let tok = crate::ar_core::Tokenizer::default();
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    let tts = MelConfig::tts();
    let asr = MelConfig::asr();
    for u in &corpus.utterances {
        let entry = ManifestEntry {
            id: u.id,
            speaker: u.speaker,
            text: tok.decode(&u.text.ids),
            classes: u.classes.clone(),
            tts_mel: format!("mels/{:05}.tts.mel", u.id),
            asr_mel: format!("mels/{:05}.asr.mel", u.id),
        };
        let tts_cfg = MelConfig { n_mels: u.tts_mel.ncols(), ..tts.clone() };
        let asr_cfg = MelConfig { n_mels: u.asr_mel.ncols(), ..asr.clone() };
        write_mel_archive(
            dir.join(&entry.tts_mel),
            &MelSpectrogram::new(u.tts_mel.clone(), tts_cfg.frame_rate())?,
            &tts_cfg,
        )?;
        write_mel_archive(
            dir.join(&entry.asr_mel),
            &MelSpectrogram::new(u.asr_mel.clone(), asr_cfg.frame_rate())?,
            &asr_cfg,
        )?;
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
    }
    manifest.flush()?;
    Ok(())
}

/// Rebuilds a corpus from its directory. Generation is deterministic, so
/// the spec and seed reproduce it; the manifest is checked against it.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let desc: CorpusDescriptor = serde_json::from_slice(&std::fs::read(dir.join("corpus.json"))?)?;
    let corpus = generate_corpus(&desc.spec, desc.seed)?;
    let manifest = std::io::BufReader::new(std::fs::File::open(dir.join("manifest.jsonl"))?);
    let mut count = 0;
    for line in manifest.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        let u = corpus
            .utterances
            .get(entry.id)
            .ok_or_else(|| Error::InvalidArgument(format!("manifest id {} outside corpus", entry.id)))?;
        if u.classes != entry.classes || u.speaker != entry.speaker {
            return Err(Error::InvalidArgument(format!(
                "manifest entry {} disagrees with the regenerated corpus",
                entry.id
            )));
        }
        count += 1;
    }
    if count != desc.utterances || count != corpus.utterances.len() {
        return Err(Error::InvalidArgument(format!(
            "manifest lists {count} utterances, corpus has {}",
            corpus.utterances.len()
        )));
    }
    Ok(corpus)
}
