use std::path::Path;

use candle_core::Device;
use flowtrace::error::Error;
use flowtrace::forgegen::{generate, Dataset, Split};
use flowtrace::harness::checkpoint::load_checkpoint;
use flowtrace::harness::model::{batch_tensors, noise_seed};
use flowtrace::harness::optim::Adam;
use flowtrace::harness::train::{train, train_with_resume, LAST_CHECKPOINT, TRAIN_LOG};
use flowtrace::harness::{BranchMode, ExperimentConfig, Model};
use flowtrace::losses::total_loss;

fn small_config(dir: &Path, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.data.train_count = 12;
    cfg.data.test_count = 4;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg
}

fn dataset(cfg: &ExperimentConfig) -> Dataset {
    Dataset { spec: cfg.data.clone(), samples: generate(&cfg.data).unwrap() }
}

#[test]
fn one_epoch_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let out = train(&cfg, &dataset(&cfg)).unwrap();
    assert!(out.best_checkpoint.exists());
    assert!(out.last_checkpoint.exists());
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].train_loss.is_finite());
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let cfg = small_config(full_dir.path(), 2);
    let data = dataset(&cfg);
    let full = train(&cfg, &data).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let first = small_config(split_dir.path(), 1);
    train(&first, &data).unwrap();
    let second = small_config(split_dir.path(), 2);
    let resumed = train_with_resume(&second, &data, Some(&split_dir.path().join(LAST_CHECKPOINT))).unwrap();

    assert_eq!(resumed.model.trainable_checksum().unwrap(), full.model.trainable_checksum().unwrap());
    // earlier epochs come back from the CSV, so compare the written logs
    let read = |d: &Path| std::fs::read_to_string(d.join(TRAIN_LOG)).unwrap();
    assert_eq!(read(split_dir.path()), read(full_dir.path()));
    assert_eq!(resumed.log.len(), 2);
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    train(&cfg, &dataset(&cfg)).unwrap();
    let mut other = cfg.clone();
    other.lora.sd_rank = 2;
    let r = load_checkpoint(&dir.path().join(LAST_CHECKPOINT), Some(&other), &Device::Cpu);
    assert!(matches!(r, Err(Error::CheckpointMismatch { .. })));
    // the recorded config still loads
    assert!(load_checkpoint(&dir.path().join(LAST_CHECKPOINT), Some(&cfg), &Device::Cpu).is_ok());
}

#[test]
fn corrupted_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let r = load_checkpoint(&path, None, &Device::Cpu);
    assert!(matches!(r, Err(Error::Format { .. })), "{r:?}", r = r.err());
}

#[test]
fn training_never_touches_frozen_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let before = Model::new(&cfg, &Device::Cpu).unwrap().frozen_checksum().unwrap();
    let out = train(&cfg, &dataset(&cfg)).unwrap();
    assert_eq!(out.model.frozen_checksum().unwrap(), before);
}

#[test]
fn overfits_a_single_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 1);
    cfg.data.train_count = 4;
    let data = dataset(&cfg);
    let samples = data.split(Split::Train);
    let model = Model::new(&cfg, &Device::Cpu).unwrap();
    let mut opt = Adam::new(&cfg.optim).unwrap();
    let (images, masks) = batch_tensors(samples.iter().copied(), &Device::Cpu).unwrap();
    let seeds: Vec<u64> = samples.iter().map(|s| noise_seed(cfg.noise.seed, &s.id, None)).collect();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let probs = model.forward(&images, &seeds).unwrap();
        let terms = total_loss(&probs, &masks, &cfg.loss).unwrap();
        losses.push(terms.values().unwrap().0);
        let grads = terms.total.backward().unwrap();
        opt.step(&model.store, &grads).unwrap();
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn removed_branches_still_train() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 1);
    cfg.branches.sam = BranchMode::Removed;
    let out = train(&cfg, &dataset(&cfg)).unwrap();
    assert!(out.log[0].train_loss.is_finite());
    assert_eq!(out.model.trainable_fractions().1, 0.0);
}
