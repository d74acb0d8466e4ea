mod common;

use melatts::align::AlignTarget;
use melatts::pipeline::*;
use melatts::Error;
use tempfile::tempdir;

fn trained(steps: usize) -> (TrainState, Vec<PreparedUtterance>) {
    let corpus = generate_corpus(&common::tiny_spec(), 1).unwrap();
    let mut state = TrainState::new(common::tiny_config(AlignTarget::Asr, 3), fit_stats(&corpus.utterances).unwrap()).unwrap();
    let data = prepare(&state.model, &corpus.utterances).unwrap();
    for _ in 0..steps {
        train_step(&mut state, &data).unwrap();
    }
    (state, data)
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempdir().unwrap();
    let (state, _) = trained(3);
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    save_checkpoint(&state, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.config, state.config);
    assert_eq!(loaded.model.params().export().unwrap(), state.model.params().export().unwrap());
    assert_eq!(loaded.optimizer.export().unwrap(), state.optimizer.export().unwrap());
    assert_eq!(loaded.model.tts_stats(), state.model.tts_stats());
    assert_eq!(loaded.model.speaker_encoder().weights(), state.model.speaker_encoder().weights());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempdir().unwrap();
    let (mut straight, data) = trained(0);
    let full: Vec<f64> = (0..6).map(|_| train_step(&mut straight, &data).unwrap().total).collect();
    let (first, _) = trained(3);
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    for want in &full[3..] {
        let got = train_step(&mut resumed, &data).unwrap().total;
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn wrong_mel_bands_are_a_typed_error() {
    let dir = tempdir().unwrap();
    let (state, _) = trained(0);
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&state, &path).unwrap();
    let mut other = state.config.model.clone();
    other.tts_mel.n_mels = 80;
    match load_checkpoint_with(&path, Some(&other)) {
        Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "n_mels"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched config loaded"),
    }
}

#[test]
fn schema_version_is_checked() {
    let dir = tempdir().unwrap();
    let (state, _) = trained(0);
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let needle = format!("\"schema_version\":{SCHEMA_VERSION}");
    let pos = bytes.windows(needle.len()).position(|w| w == needle.as_bytes()).unwrap();
    let mut patched = bytes.clone();
    let digit = pos + needle.len() - 1;
    patched[digit] = if patched[digit] == b'9' { b'8' } else { b'9' };
    std::fs::write(&path, &patched).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::SchemaVersion { .. })));
}

#[test]
fn corrupt_and_missing_files_are_errors() {
    let dir = tempdir().unwrap();
    let (state, _) = trained(0);
    let path = dir.path().join("ckpt.bin");
    assert!(matches!(load_checkpoint(&path), Err(Error::Io(_))));
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn no_temp_file_is_left_behind() {
    let dir = tempdir().unwrap();
    let (state, _) = trained(0);
    save_checkpoint(&state, dir.path().join("ckpt.bin")).unwrap();
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
}
