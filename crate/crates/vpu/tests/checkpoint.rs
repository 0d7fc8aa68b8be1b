use std::fs;

use vpu::checkpoint::{load, save};
use vpu::{AppError, CheckpointError};
use vpu_core::interact::ProtocolConfig;
use vpu_core::model::{ModelConfig, ModelParams};
use vpu_core::pue::EncoderConfig;
use vpu_core::synth::generate_instance;
use vpu_core::train::{evaluate, fit, ModelSegmenter, TrainConfig, TrainState};

fn small() -> ModelConfig {
    ModelConfig { d_model: 8, ffn_hidden: 16, dma_layers: 1, decoder_scales: vec![4], max_prompts: 8, ..ModelConfig::default() }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let params = ModelParams::init(&cfg, 12).unwrap();
    let (a, b) = (dir.path().join("a.vpuf"), dir.path().join("b.vpuf"));
    save(&a, &params, &cfg).unwrap();
    let (loaded, cfg2) = load(&a).unwrap();
    assert_eq!((&loaded, &cfg2), (&params, &cfg));
    save(&b, &loaded, &cfg2).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn damaged_files_fail_with_io_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let path = dir.path().join("m.vpuf");
    save(&path, &ModelParams::init(&cfg, 1).unwrap(), &cfg).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = load(&path).unwrap_err();
    assert!(matches!(err, AppError::Checkpoint { source: CheckpointError::Truncated, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"PNG\0");
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load(&path), Err(AppError::Checkpoint { source: CheckpointError::BadMagic, .. })));

    assert!(matches!(load(&dir.path().join("missing.vpuf")), Err(AppError::Io { .. })));
}

/// Evaluating a loaded checkpoint reproduces evaluation of the in-memory
/// parameters that were saved.
#[test]
fn saved_checkpoint_evaluates_like_memory() {
    let cfg = TrainConfig { epochs: 1, batch_size: 2, model: small(), ..TrainConfig::default() };
    let train: Vec<_> = (0..6).map(|i| generate_instance(i).unwrap()).collect();
    let test: Vec<_> = (100..104).map(|i| generate_instance(i).unwrap()).collect();
    let mut st = TrainState::init(&cfg).unwrap();
    fit(&mut st, &train, &cfg, |_| true).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.vpuf");
    save(&path, &st.params, &cfg.model).unwrap();
    let (params, model) = load(&path).unwrap();

    let enc = EncoderConfig::default();
    let proto = ProtocolConfig { max_interactions: 5, ..ProtocolConfig::default() };
    let mem = evaluate(&ModelSegmenter { params: &st.params, model: &cfg.model, encoder: &enc }, &test, &proto).unwrap();
    let disk = evaluate(&ModelSegmenter { params: &params, model: &model, encoder: &enc }, &test, &proto).unwrap();
    assert_eq!(mem.0, disk.0);
    assert_eq!(mem.1, disk.1);
}
