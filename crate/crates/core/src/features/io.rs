//! WAV and mel-archive file formats.
//!
//! A mel archive is `MELARCH1` (8 bytes), a little-endian `u64` header
//! length, a JSON header, then the `[frames, n_mels]` matrix as
//! little-endian `f32` in row-major order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};

const MEL_MAGIC: &[u8; 8] = b"MELARCH1";

/// Reads a PCM WAV file, averaging channels to mono. Returns samples in
/// `[-1, 1]` and the sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
    };
    let mono = samples
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes mono 16-bit PCM, clamping samples to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelArchiveHeader {
    pub shape: [usize; 2],
    pub frame_rate: f64,
    pub config_hash: String,
    pub config: MelConfig,
}

pub fn write_mel_archive(
    path: impl AsRef<Path>,
    mel: &MelSpectrogram,
    config: &MelConfig,
) -> Result<()> {
    let header = MelArchiveHeader {
        shape: [mel.num_frames(), mel.n_mels()],
        frame_rate: mel.frame_rate,
        config_hash: config.hash(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MEL_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in mel.frames.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_mel_archive(path: impl AsRef<Path>) -> Result<(MelSpectrogram, MelArchiveHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |msg: &str| Error::InvalidArgument(format!("mel archive: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: MelArchiveHeader = serde_json::from_slice(&bytes[16..body])?;
    if header.config.hash() != header.config_hash {
        return Err(corrupt("config hash does not match config"));
    }
    let [rows, cols] = header.shape;
    let data = &bytes[body..];
    if data.len() != rows * cols * 4 {
        return Err(corrupt("payload size does not match shape"));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let frames = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| corrupt(&e.to_string()))?;
    Ok((MelSpectrogram::new(frames, header.frame_rate)?, header))
}
