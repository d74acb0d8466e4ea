use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::data::NormStats;
use super::train::TrainState;
use crate::ar_core::SpeakerEncoder;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MELACKPT";
pub const SCHEMA_VERSION: u32 = 1;

type Arrays = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// The step RNG is a pure function of `(seed, step)`, so these two values
/// are its whole state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: TrainConfig,
    step: u64,
    rng: RngState,
    tts_stats: NormStats,
    asr_stats: NormStats,
    arrays: Vec<ArrayEntry>,
}

fn collect_arrays(state: &TrainState) -> Result<Arrays> {
    let model = &state.model;
    let mut arrays = Arrays::new();
    for (k, v) in model.params().export()? {
        arrays.insert(format!("param/{k}"), v);
    }
    for (k, v) in state.optimizer.export()? {
        arrays.insert(format!("adam/{k}"), v);
    }
    for (k, v) in model.asr_encoder().export()? {
        arrays.insert(format!("asr/{k}"), v);
    }
    let spk = model.speaker_encoder();
    arrays.insert(
        "speaker/projection".into(),
        (vec![spk.dim(), 2 * spk.n_mels()], spk.weights().to_vec()),
    );
    Ok(arrays)
}

/// Writes the training state as magic, header length, JSON header and
/// little-endian `f32` arrays. The file appears atomically.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let arrays = collect_arrays(state)?;
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, (shape, data)) in &arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config: state.config.clone(),
        step: state.step,
        rng: RngState {
            seed: state.config.seed,
            step: state.step,
        },
        tts_stats: state.model.tts_stats().clone(),
        asr_stats: state.model.asr_stats().clone(),
        arrays: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, data) in arrays.values() {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let value: serde_json::Value = serde_json::from_slice(body)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok((serde_json::from_value(value)?, &bytes[16 + len..]))
}

fn check_config(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let fields = [
        ("n_mels", found.tts_mel.n_mels, expected.tts_mel.n_mels),
        ("asr n_mels", found.asr_mel.n_mels, expected.asr_mel.n_mels),
        ("chunk_size", found.chunk_size, expected.chunk_size),
        ("d_model", found.d_model, expected.d_model),
    ];
    for (field, f, e) in fields {
        if f != e {
            return Err(Error::ConfigMismatch {
                field,
                found: f.to_string(),
                expected: e.to_string(),
            });
        }
    }
    Ok(())
}

/// Loads a checkpoint, optionally insisting on a model configuration.
/// Nothing is returned unless every array validates.
pub fn load_checkpoint_with(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    let (header, payload) = read_header(&bytes)?;
    if let Some(e) = expected {
        check_config(&header.config.model, e)?;
    }
    let mut arrays = Arrays::new();
    for entry in &header.arrays {
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Checkpoint(format!("array {} has inconsistent shape", entry.name)));
        }
        let raw = payload
            .get(entry.offset * 4..(entry.offset + entry.len) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("array {} is truncated", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        arrays.insert(entry.name.clone(), (entry.shape.clone(), data));
    }
    let section = |prefix: &str| -> Arrays {
        arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    };

    let mut state = TrainState::with_dtype(
        header.config.clone(),
        (header.tts_stats.clone(), header.asr_stats.clone()),
        DType::F32,
    )?;
    let cfg = &header.config.model;
    if state.model.tts_stats().bands() != cfg.tts_mel.n_mels {
        return Err(Error::ConfigMismatch {
            field: "n_mels",
            found: state.model.tts_stats().bands().to_string(),
            expected: cfg.tts_mel.n_mels.to_string(),
        });
    }
    state.model.params().import(&section("param/"))?;
    state.optimizer.import(&section("adam/"), header.step)?;
    state.model.asr_encoder().import(&section("asr/"))?;
    let (shape, proj) = arrays
        .get("speaker/projection")
        .ok_or_else(|| Error::Checkpoint("missing speaker projection".into()))?;
    if shape != &[cfg.d_spk, 2 * cfg.tts_mel.n_mels] {
        return Err(Error::Checkpoint("speaker projection has wrong shape".into()));
    }
    state.model.speaker = SpeakerEncoder::from_weights(cfg.tts_mel.n_mels, cfg.d_spk, proj.clone())?;
    state.step = header.step;
    Ok(state)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    load_checkpoint_with(path, None)
}
