use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::stft::{mel_filterbank, Stft};
use super::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};

/// Phase initialization seed; fixed so inversion is reproducible.
const PHASE_SEED: u64 = 0x6c_5eed;

/// Recovers a waveform of `frames * hop` samples from a log-mel
/// spectrogram with Griffin-Lim phase reconstruction.
///
/// The linear magnitude is estimated by spreading each band's power back
/// over its filter support. Quality is only good enough for auditioning.
pub fn invert_mel(mel: &MelSpectrogram, config: &MelConfig, iterations: usize) -> Result<Vec<f32>> {
    config.validate()?;
    if mel.frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mel frames"));
    }
    if mel.n_mels() != config.n_mels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} mel bands", config.n_mels),
            actual: format!("{} mel bands", mel.n_mels()),
        });
    }
    if mel.num_frames() == 0 {
        return Ok(Vec::new());
    }
    let stft = Stft::new(config.win_length, config.hop_length);
    let fb = mel_filterbank(
        config.sample_rate,
        config.win_length,
        config.n_mels,
        config.fmin,
        config.fmax,
    );
    let n_bins = stft.n_bins();
    let row_sums: Vec<f64> = fb.iter().map(|row| row.iter().sum::<f64>()).collect();
    let col_sums: Vec<f64> = (0..n_bins)
        .map(|k| fb.iter().map(|row| row[k]).sum::<f64>())
        .collect();

    let magnitudes: Vec<Vec<f64>> = mel
        .frames
        .rows()
        .into_iter()
        .map(|row| {
            let band_power: Vec<f64> = row
                .iter()
                .map(|&v| ((v as f64).exp() - config.log_floor).max(0.0))
                .collect();
            (0..n_bins)
                .map(|k| {
                    if col_sums[k] <= 0.0 {
                        return 0.0;
                    }
                    let density: f64 = fb
                        .iter()
                        .zip(&band_power)
                        .zip(&row_sums)
                        .filter(|((_, _), rs)| **rs > 0.0)
                        .map(|((filter, p), rs)| filter[k] * p / rs)
                        .sum();
                    (density / col_sums[k]).sqrt()
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(PHASE_SEED);
    let mut spectra: Vec<Vec<Complex<f64>>> = magnitudes
        .iter()
        .map(|mags| {
            mags.iter()
                .map(|&m| Complex::from_polar(m, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();

    let mut signal = stft.inverse(&spectra);
    for _ in 0..iterations {
        let estimate = stft.forward(&signal);
        for ((target, est), mags) in spectra.iter_mut().zip(&estimate).zip(&magnitudes) {
            for ((slot, e), &m) in target.iter_mut().zip(est).zip(mags) {
                let norm = e.norm();
                *slot = if norm > 1e-12 {
                    e * (m / norm)
                } else {
                    Complex::new(m, 0.0)
                };
            }
        }
        signal = stft.inverse(&spectra);
    }
    Ok(signal.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::compute_mel;
    use ndarray::Array2;

    #[test]
    fn silence_inverts_to_near_zero() {
        let cfg = MelConfig::tts();
        let floor = (cfg.log_floor.ln()) as f32;
        let mel = MelSpectrogram::new(Array2::from_elem((20, 80), floor), 50.0).unwrap();
        let wave = invert_mel(&mel, &cfg, 8).unwrap();
        let rms = (wave.iter().map(|v| v * v).sum::<f32>() / wave.len() as f32).sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn output_length_tracks_frame_count() {
        let cfg = MelConfig::tts();
        let mel = MelSpectrogram::new(Array2::from_elem((50, 80), -3.0), 50.0).unwrap();
        let wave = invert_mel(&mel, &cfg, 2).unwrap();
        assert!((wave.len() as i64 - 24_000).abs() <= cfg.hop_length as i64);
    }

    #[test]
    fn tone_round_trip_keeps_its_spectral_peak() {
        let cfg = MelConfig::tts();
        let sr = cfg.sample_rate as f32;
        let tone: Vec<f32> = (0..24_000)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / sr).sin())
            .collect();
        let mel = compute_mel(&tone, &cfg).unwrap();
        let wave = invert_mel(&mel, &cfg, 32).unwrap();

        let stft = Stft::new(cfg.win_length, cfg.hop_length);
        let signal: Vec<f64> = wave.iter().map(|&v| v as f64).collect();
        let spectra = stft.forward(&signal);
        let mut energy = vec![0.0; stft.n_bins()];
        for spec in &spectra {
            for (e, c) in energy.iter_mut().zip(spec) {
                *e += c.norm_sqr();
            }
        }
        let peak = energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let peak_hz = peak as f64 * cfg.sample_rate as f64 / cfg.win_length as f64;
        // one mel band around 440 Hz is roughly 60 Hz wide at this resolution
        assert!((peak_hz - 440.0).abs() < 100.0, "peak at {peak_hz} Hz");

        let rec = compute_mel(&wave, &cfg).unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = mel
            .frames
            .iter()
            .zip(rec.frames.iter())
            .map(|(&x, &y)| (x as f64, y as f64))
            .unzip();
        assert!(pearson(&a, &b) > 0.8);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }
}
