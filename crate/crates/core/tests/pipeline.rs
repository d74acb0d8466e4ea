mod common;

use melatts::align::AlignTarget;
use melatts::pipeline::*;
use tempfile::tempdir;

#[test]
fn corpus_directory_round_trips() {
    let dir = tempdir().unwrap();
    let corpus = generate_corpus(&common::tiny_spec(), 6).unwrap();
    write_corpus_dir(&corpus, dir.path()).unwrap();
    let back = load_corpus_dir(dir.path()).unwrap();
    assert_eq!(back.utterances.len(), corpus.utterances.len());
    for (a, b) in back.utterances.iter().zip(&corpus.utterances) {
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.tts_mel, b.tts_mel);
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let first: ManifestEntry = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert!(dir.path().join(&first.tts_mel).exists());
    assert!(dir.path().join(&first.asr_mel).exists());

    let mut lines: Vec<String> = manifest.lines().map(String::from).collect();
    let mut entry = first.clone();
    entry.speaker = 1 - entry.speaker;
    lines[0] = serde_json::to_string(&entry).unwrap();
    let tampered = lines.join("\n");
    std::fs::write(dir.path().join("manifest.jsonl"), tampered).unwrap();
    assert!(load_corpus_dir(dir.path()).is_err());
}

#[test]
fn oracle_is_exact_on_clean_speech_and_degrades_with_noise() {
    let mut last = f64::INFINITY;
    for (i, noise) in [0.0f32, 2.0, 4.0, 8.0, 16.0].into_iter().enumerate() {
        let spec = ToyCorpusSpec { noise, num_utterances: 64, ..Default::default() };
        let corpus = generate_corpus(&spec, 2).unwrap();
        let acc = corpus
            .utterances
            .iter()
            .map(|u| content_accuracy(&u.classes, &corpus.oracle_decode(u.tts_mel.view())))
            .sum::<f64>()
            / corpus.utterances.len() as f64;
        if i == 0 {
            assert_eq!(acc, 1.0);
        }
        assert!(acc <= last, "accuracy rose to {acc} at noise {noise}");
        last = acc;
    }
    assert!(last < 1.0);
}

#[test]
fn train_run_reports_on_schedule() {
    let corpus = generate_corpus(&common::tiny_spec(), 5).unwrap();
    let config = TrainConfig { steps: 6, eval_every: 2, ..common::tiny_config(AlignTarget::None, 0) };
    let mut state = TrainState::new(config, fit_stats(&corpus.utterances).unwrap()).unwrap();
    let data = prepare(&state.model, &corpus.utterances).unwrap();
    let set: Vec<Utterance> = corpus.utterances[..3].to_vec();
    let opts = EvalOptions::default();
    let mut seen = 0;
    let out = train_run(&mut state, &data, Some((&corpus, &set, &opts)), "tiny", 100, |_, r| seen += usize::from(r.is_some())).unwrap();
    assert_eq!(state.step, 6);
    assert_eq!(out.losses.len(), 6);
    assert!(out.losses.iter().all(|l| l.align == 0.0 && (l.total - (l.diff + l.stop)).abs() < 1e-5));
    let steps: Vec<u64> = out.reports.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![2, 4, 6]);
    assert_eq!(seen, 3);
    for r in &out.reports {
        assert!((0.0..=1.0).contains(&r.content_accuracy));
        assert!((0.0..=1.0).contains(&r.stop_accuracy));
        assert!((-1.0..=1.0).contains(&r.ss_proxy));
        assert!(r.losses.is_some());
    }
}

#[test]
fn reports_round_trip_and_plot() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let report = |label: &str, step, acc| EvalReport {
        label: label.into(),
        step,
        mode: EvalMode::Offline,
        utterances: 4,
        content_accuracy: acc,
        ss_proxy: 0.9,
        ss_cross: 0.2,
        stop_accuracy: 1.0,
        length_accuracy: 1.0,
        diff_mse: 0.1,
        truncated: 0,
        losses: None,
    };
    let all = vec![report("on", 100, 0.2), report("on", 200, 0.6), report("off", 100, 0.1), report("off", 200, 0.3), report("off", 300, 0.4)];
    for r in &all {
        append_report(&path, r).unwrap();
    }
    assert_eq!(read_reports(&path).unwrap(), all);

    let png = dir.path().join("fig.png");
    let csv = plot_convergence(&all, &png).unwrap();
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
    let rows = csv::Reader::from_path(&csv).unwrap().records().count();
    assert_eq!(rows, all.len());
    assert!(plot_convergence(&[], dir.path().join("empty.png")).is_err());
}

#[test]
fn constant_u_ablation_ignores_the_prompt_crop() {
    let corpus = generate_corpus(&common::tiny_spec(), 5).unwrap();
    let mut cfg = common::tiny_model(AlignTarget::Asr);
    cfg.use_utterance_embedding = false;
    let model = Model::new(cfg, 1, candle_core::DType::F32).unwrap();
    let a = corpus.utterances[0].tts_mel.view();
    let b = corpus.utterances[1].tts_mel.view();
    let u = model.utterance_embeddings(&[a, b]).unwrap().to_vec2::<f32>().unwrap();
    assert_eq!(u[0], u[1]);
}

#[test]
fn offline_synthesis_produces_audio() {
    let corpus = generate_corpus(&common::tiny_spec(), 5).unwrap();
    let mut model = Model::new(common::tiny_model(AlignTarget::Asr), 1, candle_core::DType::F32).unwrap();
    let (tts, asr) = fit_stats(&corpus.utterances).unwrap();
    model.set_stats(tts, asr);
    let gen = melatts::streaming::GenerationConfig::default();
    let s = synthesize_offline(&model, &corpus.utterances[0].text.ids, corpus.utterances[1].tts_mel.view(), &gen).unwrap();
    assert_eq!(s.generated.mel.nrows(), s.generated.num_chunks * model.config().chunk_size);
    let hop = model.config().tts_mel.hop_length;
    assert!(s.waveform.len().abs_diff(s.generated.mel.nrows() * hop) <= hop);
    assert!(s.waveform.iter().all(|x| x.is_finite()));
}
