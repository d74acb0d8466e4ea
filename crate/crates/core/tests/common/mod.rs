#![allow(dead_code)]

use melatts::align::AlignTarget;
use melatts::pipeline::*;

/// A corpus on 8-band grids, small enough for f64 gradient checks.
pub fn tiny_spec() -> ToyCorpusSpec {
    ToyCorpusSpec {
        num_tokens: 4,
        num_utterances: 12,
        min_len: 2,
        max_len: 3,
        tts_bands: 8,
        asr_bands: 8,
        margin: 0.2,
        ..Default::default()
    }
}

pub fn tiny_model(align: AlignTarget) -> ModelConfig {
    let mut m = ModelConfig {
        d_model: 8,
        decoder_layers: 1,
        decoder_heads: 2,
        max_positions: 32,
        dit_width: 8,
        dit_layers: 1,
        dit_heads: 2,
        d_spk: 4,
        d_utt: 4,
        utt_width: 8,
        utt_layers: 1,
        utt_heads: 2,
        utt_max_frames: 16,
        asr_channels: 8,
        d_asr: 8,
        asr_heads: 2,
        asr_max_rows: 32,
        align_target: align,
        ..ModelConfig::default()
    };
    m.tts_mel.n_mels = 8;
    m.asr_mel.n_mels = 8;
    m
}

pub fn tiny_config(align: AlignTarget, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 4,
        steps: 20,
        learning_rate: 1e-3,
        crop_min_frames: 4,
        crop_max_frames: 12,
        eval_utterances: 4,
        model: tiny_model(align),
        ..Default::default()
    }
}

/// Central finite differences against autograd for one loss component on
/// the tiny f64 model. Returns the number of coordinates compared and the
/// worst relative error; panics past 1e-4.
pub fn finite_difference_check(
    align: AlignTarget,
    pick: fn(&Losses) -> &candle_core::Tensor,
    label: &str,
) -> (usize, f64) {
    use candle_core::{DType, Tensor};
    use melatts::nn::tensor_to_f64;

    let corpus = generate_corpus(&tiny_spec(), 3).unwrap();
    let config = tiny_config(align, 7);
    let state = TrainState::with_dtype(config.clone(), fit_stats(&corpus.utterances).unwrap(), DType::F64).unwrap();
    let params = state.model.params();
    assert!(params.num_params() <= 10_000, "{} parameters", params.num_params());
    let data = prepare(&state.model, &corpus.utterances).unwrap();
    let plan = plan_batch(&config, &data, 0).unwrap();
    let eval = || scalar(pick(&compute_losses(&state.model, &data, &plan).unwrap())).unwrap();
    let losses = compute_losses(&state.model, &data, &plan).unwrap();
    let grads = pick(&losses).backward().unwrap();

    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, var) in params.vars() {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let analytic = tensor_to_f64(g).unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let base = tensor_to_f64(var.as_tensor()).unwrap();
        // a few coordinates per tensor, spread across it
        let stride = (base.len() / 3).max(1);
        for i in (0..base.len()).step_by(stride).take(3) {
            let set = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), params.device()).unwrap()).unwrap();
            };
            set(eps);
            let up = eval();
            set(-eps);
            let down = eval();
            set(0.0);
            let fd = (up - down) / (2.0 * eps);
            let g = analytic[i];
            let scale = fd.abs().max(g.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (fd - g).abs() / scale;
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{label}: {name}[{i}] analytic {g} vs finite difference {fd}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "{label}: only {checked} coordinates had a gradient");
    (checked, worst)
}
