//! Acoustic front-end: log-mel extraction, fixed-size chunking, random
//! cropping for utterance embeddings, and a Griffin-Lim fallback inverter.

mod griffin_lim;
pub mod io;
pub mod stft;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use griffin_lim::invert_mel;
use stft::{mel_filterbank, Stft};

/// Parameters of a log-mel front-end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl MelConfig {
    /// 24 kHz, 80 bands, window 1920, hop 480 (50 frames/s).
    pub fn tts() -> Self {
        Self {
            sample_rate: 24_000,
            n_mels: 80,
            win_length: 1920,
            hop_length: 480,
            fmin: 0.0,
            fmax: 12_000.0,
            log_floor: 1e-5,
        }
    }

    /// 16 kHz, 128 bands, window 400, hop 160 (100 frames/s before the
    /// semantic encoder's 4x downsampling).
    pub fn asr() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 128,
            win_length: 400,
            hop_length: 160,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-5,
        }
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length as f64
    }

    /// Integer frame rate when `hop_length` divides `sample_rate`.
    pub fn exact_frame_rate(&self) -> Option<u32> {
        (self.sample_rate % self.hop_length as u32 == 0)
            .then(|| self.sample_rate / self.hop_length as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.win_length == 0 || self.hop_length == 0 {
            return Err(Error::InvalidArgument(
                "n_mels, win_length and hop_length must be positive".into(),
            ));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::InvalidArgument(format!(
                "frequency range [{}, {}] is empty",
                self.fmin, self.fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidArgument("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Short stable digest of the configuration, stored in mel archives.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("MelConfig serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn band_centers(&self) -> Vec<f64> {
        stft::mel_band_centers(self.n_mels, self.fmin, self.fmax)
    }
}

/// A log-mel spectrogram, `[frames, n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub frame_rate: f64,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>, frame_rate: f64) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel frames"));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 / self.frame_rate
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.frames.view()
    }
}

/// A fixed-size block of `N` consecutive frames. The final chunk of an
/// utterance is zero-padded; `valid_frames` counts the real ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MelChunk {
    pub frames: Array2<f32>,
    pub index: usize,
    pub valid_frames: usize,
}

impl MelChunk {
    pub fn size(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_padded(&self) -> bool {
        self.valid_frames < self.size()
    }
}

/// Log-mel spectrogram of `waveform` (centered Hann STFT, power spectrum,
/// triangular mel filterbank, natural log with `log_floor`).
pub fn compute_mel(waveform: &[f32], config: &MelConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if waveform.is_empty() {
        return Err(Error::EmptyInput("waveform"));
    }
    if waveform.len() < config.hop_length {
        return Err(Error::InvalidArgument(format!(
            "waveform of {} samples is shorter than one hop ({})",
            waveform.len(),
            config.hop_length
        )));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("waveform"));
    }
    let signal: Vec<f64> = waveform.iter().map(|&v| v as f64).collect();
    let stft = Stft::new(config.win_length, config.hop_length);
    let fb = mel_filterbank(
        config.sample_rate,
        config.win_length,
        config.n_mels,
        config.fmin,
        config.fmax,
    );
    let spectra = stft.forward(&signal);
    let mut frames = Array2::<f32>::zeros((spectra.len(), config.n_mels));
    for (k, spec) in spectra.iter().enumerate() {
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        for (m, filter) in fb.iter().enumerate() {
            let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            frames[[k, m]] = (energy + config.log_floor).ln() as f32;
        }
    }
    MelSpectrogram::new(frames, config.frame_rate())
}

/// Splits `mel` into `ceil(L / chunk_size)` chunks, zero-padding the last.
pub fn chunk_mel(mel: &MelSpectrogram, chunk_size: usize) -> Result<Vec<MelChunk>> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk size must be >= 1".into()));
    }
    let total = mel.num_frames();
    let n_chunks = total.div_ceil(chunk_size);
    Ok((0..n_chunks)
        .map(|i| {
            let start = i * chunk_size;
            let valid = (total - start).min(chunk_size);
            let mut frames = Array2::<f32>::zeros((chunk_size, mel.n_mels()));
            frames
                .slice_mut(s![..valid, ..])
                .assign(&mel.frames.slice(s![start..start + valid, ..]));
            MelChunk {
                frames,
                index: i,
                valid_frames: valid,
            }
        })
        .collect())
}

/// Concatenates the valid frames of `chunks` back into one matrix.
pub fn dechunk(chunks: &[MelChunk], n_mels: usize) -> Array2<f32> {
    let views: Vec<_> = chunks
        .iter()
        .map(|c| c.frames.slice(s![..c.valid_frames, ..]))
        .collect();
    if views.is_empty() {
        return Array2::zeros((0, n_mels));
    }
    ndarray::concatenate(Axis(0), &views).expect("chunks share n_mels")
}

/// A random contiguous crop with `min_frames <= len <= min(max_frames, L)`.
pub fn crop_segment<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    rng: &mut R,
    min_frames: usize,
    max_frames: usize,
) -> Result<MelSpectrogram> {
    let total = mel.num_frames();
    if min_frames == 0 || min_frames > max_frames {
        return Err(Error::InvalidArgument(format!(
            "crop bounds [{min_frames}, {max_frames}] are invalid"
        )));
    }
    if total < min_frames {
        return Err(Error::InvalidArgument(format!(
            "segment of {total} frames is shorter than the minimum crop of {min_frames}"
        )));
    }
    let upper = max_frames.min(total);
    let len = rng.random_range(min_frames..=upper);
    let start = rng.random_range(0..=total - len);
    Ok(MelSpectrogram {
        frames: mel.frames.slice(s![start..start + len, ..]).to_owned(),
        frame_rate: mel.frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mel(frames: usize, n_mels: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((frames, n_mels), |_| rand::Rng::random_range(&mut rng, -5.0f32..5.0));
        MelSpectrogram::new(data, 50.0).unwrap()
    }

    #[test]
    fn one_second_at_24k_gives_fifty_frames() {
        let wave: Vec<f32> = (0..24_000)
            .map(|i| (i as f32 * 0.01).sin() * 0.1)
            .collect();
        let mel = compute_mel(&wave, &MelConfig::tts()).unwrap();
        assert_eq!(mel.num_frames(), 50);
        assert_eq!(mel.n_mels(), 80);
        assert_eq!(mel.frame_rate, 50.0);
    }

    #[test]
    fn asr_front_end_runs_at_100_hz() {
        let wave = vec![0.01f32; 16_000];
        let mel = compute_mel(&wave, &MelConfig::asr()).unwrap();
        assert_eq!(mel.num_frames(), 100);
        assert_eq!(mel.n_mels(), 128);
    }

    #[test]
    fn frame_rates_are_exact() {
        assert_eq!(MelConfig::tts().exact_frame_rate(), Some(50));
        assert_eq!(MelConfig::asr().exact_frame_rate(), Some(100));
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let mel = compute_mel(&vec![0.0; 4800], &MelConfig::tts()).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn compute_mel_rejects_empty_and_short_input() {
        assert!(matches!(
            compute_mel(&[], &MelConfig::tts()),
            Err(Error::EmptyInput(_))
        ));
        assert!(compute_mel(&[0.0; 100], &MelConfig::tts()).is_err());
    }

    #[test]
    fn compute_mel_is_pure() {
        let wave: Vec<f32> = (0..9600).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
        let a = compute_mel(&wave, &MelConfig::tts()).unwrap();
        let b = compute_mel(&wave, &MelConfig::tts()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fifty_frames_make_seven_chunks() {
        let mel = random_mel(50, 80, 1);
        let chunks = chunk_mel(&mel, 8).unwrap();
        assert_eq!(chunks.len(), 7);
        assert_eq!(chunks[6].valid_frames, 2);
        assert!(chunks[6].frames.slice(s![2.., ..]).iter().all(|&v| v == 0.0));
        assert!(chunks[..6].iter().all(|c| c.valid_frames == 8));
    }

    #[test]
    fn exact_multiple_gives_unpadded_chunk() {
        let chunks = chunk_mel(&random_mel(8, 80, 2), 8).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].valid_frames, 8);
    }

    #[test]
    fn chunk_of_eight_spans_160_ms() {
        let cfg = MelConfig::tts();
        let ms = 8.0 / cfg.frame_rate() * 1000.0;
        assert_eq!(ms, 160.0);
    }

    #[test]
    fn zero_chunk_size_is_rejected() {
        assert!(chunk_mel(&random_mel(4, 3, 3), 0).is_err());
    }

    proptest! {
        #[test]
        fn dechunk_inverts_chunk(frames in 0usize..70, seed in any::<u64>(), n_idx in 0usize..4) {
            let n = [1, 4, 8, 16][n_idx];
            let mel = random_mel(frames, 6, seed);
            let chunks = chunk_mel(&mel, n).unwrap();
            prop_assert_eq!(chunks.len(), frames.div_ceil(n));
            prop_assert_eq!(dechunk(&chunks, 6), mel.frames);
        }
    }

    #[test]
    fn crop_is_deterministic_under_seed() {
        let mel = random_mel(100, 4, 5);
        let a = crop_segment(&mel, &mut ChaCha8Rng::seed_from_u64(9), 25, 75).unwrap();
        let b = crop_segment(&mel, &mut ChaCha8Rng::seed_from_u64(9), 25, 75).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forced_crop_returns_whole_input() {
        let mel = random_mel(25, 4, 6);
        let crop = crop_segment(&mel, &mut ChaCha8Rng::seed_from_u64(0), 25, 75).unwrap();
        assert_eq!(crop, mel);
    }

    #[test]
    fn crop_lengths_stay_in_bounds() {
        let mel = random_mel(100, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let crop = crop_segment(&mel, &mut rng, 25, 75).unwrap();
            assert!((25..=75).contains(&crop.num_frames()));
        }
    }

    #[test]
    fn crop_rejects_short_input() {
        let mel = random_mel(10, 2, 8);
        assert!(crop_segment(&mel, &mut ChaCha8Rng::seed_from_u64(0), 25, 75).is_err());
    }
}
