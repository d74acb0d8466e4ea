use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `n_mels` triangular filters spanning `[fmin, fmax]`.
pub fn mel_band_centers(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let points = mel_points(n_mels, fmin, fmax);
    points[1..=n_mels].to_vec()
}

fn mel_points(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular mel filterbank, shape `[n_mels][n_fft / 2 + 1]`, peak-normalized.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let points = mel_points(n_mels, fmin, fmax);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    (0..n_mels)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Maps an index of the reflect-padded signal back into `[0, len)`.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Short-time Fourier transform with centered (reflect-padded) frames.
///
/// Frame `k` is centered on sample `k * hop`; a signal of `len` samples
/// yields `len / hop` frames.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len / self.hop
    }

    /// One-sided spectra, `[frames][n_fft / 2 + 1]`.
    pub fn forward(&self, signal: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let half = (self.n_fft / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        (0..self.num_frames(signal.len()))
            .map(|k| {
                let start = (k * self.hop) as isize - half;
                for (i, slot) in buf.iter_mut().enumerate() {
                    let s = signal[reflect_index(start + i as isize, signal.len())];
                    *slot = Complex::new(s * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse producing `frames * hop` samples.
    pub fn inverse(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let len = spectra.len() * self.hop;
        let half = self.n_fft / 2;
        let mut out = vec![0.0; len + self.n_fft];
        let mut norm = vec![0.0; len + self.n_fft];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (k, spec) in spectra.iter().enumerate() {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < spec.len() {
                    spec[i]
                } else {
                    spec[self.n_fft - i].conj()
                };
            }
            self.inverse.process(&mut buf);
            // padded coordinates: frame k starts at k * hop
            let start = k * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                out[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        (0..len)
            .map(|t| {
                let n = norm[t + half];
                if n > 1e-8 {
                    out[t + half] / n
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_repeating_edge() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn stft_inverse_reconstructs_interior() {
        let stft = Stft::new(64, 16);
        let signal: Vec<f64> = (0..512)
            .map(|i| (i as f64 * 0.07).sin() + 0.3 * (i as f64 * 0.31).cos())
            .collect();
        let rec = stft.inverse(&stft.forward(&signal));
        assert_eq!(rec.len(), 512);
        for t in 32..480 {
            assert!((rec[t] - signal[t]).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn filterbank_rows_peak_at_band_centers() {
        let fb = mel_filterbank(24000, 1920, 80, 0.0, 12000.0);
        assert_eq!(fb.len(), 80);
        assert_eq!(fb[0].len(), 961);
        for row in &fb {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.5 && peak <= 1.0);
        }
    }
}
