use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frozen speaker encoder: per-band mean (with the overall gain removed)
/// and per-band standard deviation, through a fixed random projection, then
/// unit-normalized. Never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEncoder {
    n_mels: usize,
    dim: usize,
    /// `[2 * n_mels, dim]`, row-major.
    projection: Vec<f32>,
}

impl SpeakerEncoder {
    pub fn new(n_mels: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_mels == 0 || dim == 0 {
            return Err(Error::InvalidArgument("speaker encoder needs positive sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (2.0 * n_mels as f32).sqrt()).expect("finite std");
        let projection = (0..2 * n_mels * dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            n_mels,
            dim,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn weights(&self) -> &[f32] {
        &self.projection
    }

    pub fn from_weights(n_mels: usize, dim: usize, projection: Vec<f32>) -> Result<Self> {
        if projection.len() != 2 * n_mels * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", 2 * n_mels * dim),
                actual: format!("{}", projection.len()),
            });
        }
        Ok(Self {
            n_mels,
            dim,
            projection,
        })
    }

    /// Embeds log-mel frames `[L, n_mels]` (un-normalized).
    pub fn speaker_embed(&self, mel: ArrayView2<'_, f32>) -> Result<Array1<f32>> {
        if mel.nrows() == 0 {
            return Err(Error::EmptyInput("speaker encoder input"));
        }
        if mel.ncols() != self.n_mels {
            return Err(Error::ShapeMismatch {
                expected: format!("[_, {}]", self.n_mels),
                actual: format!("[{}, {}]", mel.nrows(), mel.ncols()),
            });
        }
        let mean = mel.mean_axis(Axis(0)).expect("non-empty");
        let std = mel.std_axis(Axis(0), 0.0);
        let gain = mean.mean().expect("non-empty");
        let stats: Vec<f32> = mean.iter().map(|m| m - gain).chain(std.iter().copied()).collect();
        let proj = Array2::from_shape_vec((2 * self.n_mels, self.dim), self.projection.clone())
            .expect("shape checked at construction");
        let out = Array1::from(stats).dot(&proj);
        let norm = out.dot(&out).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("speaker embedding"));
        }
        if norm == 0.0 {
            return Ok(out);
        }
        Ok(out / norm)
    }
}

pub fn cosine(a: &Array1<f32>, b: &Array1<f32>) -> f32 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}
