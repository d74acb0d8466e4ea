//! Synthetic speech corpus: every token class owns a spectro-temporal
//! template (two Gaussian tracks gliding along the mel axis), each token
//! fills exactly one chunk, and speakers differ by a spectral tilt.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ar_core::{TextTokens, Tokenizer};
use crate::error::{Error, Result};

const BASE_LEVEL: f32 = -4.0;
const TEMPLATE_ATTEMPTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub num_tokens: usize,
    /// Tilt in log units across the full band range, one per speaker.
    pub speaker_tilts: Vec<f32>,
    pub num_utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Standard deviation of additive log-mel noise.
    pub noise: f32,
    /// Minimum RMS distance between detrended templates.
    pub margin: f32,
    pub tts_bands: usize,
    pub asr_bands: usize,
    pub tts_frames_per_token: usize,
    pub asr_frames_per_token: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            num_tokens: 16,
            speaker_tilts: vec![-3.0, 3.0],
            num_utterances: 512,
            min_len: 3,
            max_len: 8,
            noise: 0.1,
            margin: 0.5,
            tts_bands: 80,
            asr_bands: 128,
            tts_frames_per_token: 8,
            asr_frames_per_token: 16,
        }
    }
}

/// Shape of one token class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub start: f32,
    pub end: f32,
    pub amplitude: f32,
    pub width: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub tracks: [Track; 2],
}

impl Template {
    /// Noise-free, tilt-free log-mel contribution `[frames, bands]`.
    pub fn render(&self, frames: usize, bands: usize) -> Array2<f32> {
        Array2::from_shape_fn((frames, bands), |(t, b)| {
            let tau = (t as f32 + 0.5) / frames as f32;
            let f = band_position(b, bands);
            self.tracks
                .iter()
                .map(|tr| {
                    let c = tr.start + (tr.end - tr.start) * tau;
                    tr.amplitude * (-(f - c).powi(2) / (2.0 * tr.width * tr.width)).exp()
                })
                .sum()
        })
    }
}

fn band_position(b: usize, bands: usize) -> f32 {
    if bands == 1 {
        0.5
    } else {
        b as f32 / (bands - 1) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub text: TextTokens,
    pub classes: Vec<usize>,
    pub speaker: usize,
    /// Raw log-mel on the synthesis grid, `[len * 8, 80]`.
    pub tts_mel: Array2<f32>,
    /// Raw log-mel on the recognizer grid, `[len * 16, 128]`.
    pub asr_mel: Array2<f32>,
    /// First frame of each token on the synthesis grid.
    pub alignment: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: ToyCorpusSpec,
    pub seed: u64,
    pub templates: Vec<Template>,
    pub utterances: Vec<Utterance>,
    detrended: Vec<Array2<f32>>,
}

/// Removes the least-squares line over bands from every frame, which
/// cancels any per-frame gain and linear spectral tilt.
pub fn detrend_frames(frames: ArrayView2<'_, f32>) -> Array2<f32> {
    let bands = frames.ncols();
    let xs: Vec<f32> = (0..bands).map(|b| band_position(b, bands)).collect();
    let mx = xs.iter().sum::<f32>() / bands as f32;
    let sxx: f32 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let mut out = frames.to_owned();
    for mut row in out.rows_mut() {
        let my = row.sum() / bands as f32;
        let sxy: f32 = row.iter().zip(&xs).map(|(y, x)| (y - my) * (x - mx)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        row.iter_mut()
            .zip(&xs)
            .for_each(|(y, x)| *y -= my + slope * (x - mx));
    }
    out
}

fn rms_distance(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    let n = a.len() as f32;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>() / n).sqrt()
}

fn draw_template(rng: &mut ChaCha8Rng) -> Template {
    let mut track = || Track {
        start: rng.random_range(0.05..0.95),
        end: rng.random_range(0.05..0.95),
        amplitude: rng.random_range(2.0..4.0),
        width: rng.random_range(0.03..0.08),
    };
    Template {
        tracks: [track(), track()],
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let tok = Tokenizer::default();
        if self.num_tokens < 2 || self.num_tokens > tok.vocab_size() - 3 {
            return Err(Error::InvalidArgument(format!(
                "num_tokens {} must lie in [2, {}]",
                self.num_tokens,
                tok.vocab_size() - 3
            )));
        }
        if self.speaker_tilts.is_empty() {
            return Err(Error::InvalidArgument("at least one speaker is required".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument("utterance length bounds are invalid".into()));
        }
        if self.tts_bands < 2 || self.asr_bands < 2 || self.tts_frames_per_token == 0 || self.asr_frames_per_token == 0 {
            return Err(Error::InvalidArgument("grid sizes must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::InvalidArgument("noise and margin must be >= 0".into()));
        }
        Ok(())
    }

    /// Text id of class `k`: the `k`-th alphabet symbol.
    pub fn token_id(&self, class: usize) -> u32 {
        let alphabet: Vec<char> = crate::ar_core::tokenizer::DEFAULT_ALPHABET.chars().collect();
        Tokenizer::default()
            .symbol_id(alphabet[class])
            .expect("class within alphabet")
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        (0..self.num_tokens).find(|&k| self.token_id(k) == id)
    }
}

/// Deterministically generates templates and utterances. Fails with
/// `DegenerateCorpus` when the template margin cannot be met.
pub fn generate_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = spec.tts_frames_per_token;
    let mut templates: Vec<Template> = Vec::with_capacity(spec.num_tokens);
    let mut detrended: Vec<Array2<f32>> = Vec::with_capacity(spec.num_tokens);
    let mut attempts = 0;
    while templates.len() < spec.num_tokens {
        attempts += 1;
        if attempts > TEMPLATE_ATTEMPTS {
            return Err(Error::DegenerateCorpus(format!(
                "could not place {} templates {} apart",
                spec.num_tokens, spec.margin
            )));
        }
        let cand = draw_template(&mut rng);
        let d = detrend_frames(cand.render(frames, spec.tts_bands).view());
        if detrended.iter().all(|o| rms_distance(o, &d) >= spec.margin) {
            templates.push(cand);
            detrended.push(d);
        }
    }

    let tok = Tokenizer::default();
    let normal = StandardNormal;
    let mut utterances = Vec::with_capacity(spec.num_utterances);
    for id in 0..spec.num_utterances {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let classes: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.num_tokens)).collect();
        let speaker = id % spec.speaker_tilts.len();
        let tilt = spec.speaker_tilts[speaker];
        let render = |bands: usize, per_token: usize, rng: &mut ChaCha8Rng| {
            let mut mel = Array2::<f32>::zeros((len * per_token, bands));
            for (i, &k) in classes.iter().enumerate() {
                let block = templates[k].render(per_token, bands);
                mel.slice_mut(ndarray::s![i * per_token..(i + 1) * per_token, ..])
                    .assign(&block);
            }
            for ((_, b), v) in mel.indexed_iter_mut() {
                let n: f32 = normal.sample(rng);
                *v += BASE_LEVEL + tilt * (band_position(b, bands) - 0.5) + spec.noise * n;
            }
            mel
        };
        let tts_mel = render(spec.tts_bands, frames, &mut rng);
        let asr_mel = render(spec.asr_bands, spec.asr_frames_per_token, &mut rng);
        let ids = classes.iter().map(|&k| spec.token_id(k)).collect();
        utterances.push(Utterance {
            id,
            text: TextTokens::new(ids, tok.vocab_size())?,
            classes,
            speaker,
            tts_mel,
            asr_mel,
            alignment: (0..len).map(|i| i * frames).collect(),
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        seed,
        templates,
        utterances,
        detrended,
    })
}

impl Corpus {
    /// Nearest detrended template per chunk of raw log-mel frames; a
    /// trailing partial chunk is ignored.
    pub fn oracle_decode(&self, mel: ArrayView2<'_, f32>) -> Vec<usize> {
        let n = self.spec.tts_frames_per_token;
        (0..mel.nrows() / n)
            .map(|i| {
                let chunk = detrend_frames(mel.slice(ndarray::s![i * n..(i + 1) * n, ..]));
                (0..self.templates.len())
                    .min_by(|&a, &b| {
                        rms_distance(&self.detrended[a], &chunk).total_cmp(&rms_distance(&self.detrended[b], &chunk))
                    })
                    .expect("at least two templates")
            })
            .collect()
    }

    /// Minimum pairwise detrended distance between templates.
    pub fn template_margin(&self) -> f32 {
        let mut best = f32::INFINITY;
        for i in 0..self.detrended.len() {
            for j in i + 1..self.detrended.len() {
                best = best.min(rms_distance(&self.detrended[i], &self.detrended[j]));
            }
        }
        best
    }

    pub fn num_speakers(&self) -> usize {
        self.spec.speaker_tilts.len()
    }
}

/// Position-wise match rate over the longer of the two sequences; two
/// empty sequences match perfectly.
pub fn content_accuracy(reference: &[usize], hypothesis: &[usize]) -> f64 {
    let denom = reference.len().max(hypothesis.len());
    if denom == 0 {
        return 1.0;
    }
    let hits = reference.iter().zip(hypothesis).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}
