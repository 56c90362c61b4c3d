mod common;

use candle_core::{DType, Device};
use common::{max_abs_diff, panorama, sweep, tiny_config};
use gazediff_model::model::{read_checkpoint_info, CHECKPOINT_VERSION};
use gazediff_model::{GazeDiffusion, ModelError, Trainer, TrainingSet};

fn tiny_data(model: &GazeDiffusion) -> TrainingSet {
    let images = vec![panorama(16, 3), panorama(16, 11)];
    let pairs: Vec<_> = (0..8).map(|i| (sweep(12, i as f64 * 0.3, "img"), i % 2)).collect();
    TrainingSet::new(model, &images, &pairs).unwrap()
}

#[test]
fn one_epoch_lowers_loss() {
    let mut cfg = tiny_config();
    cfg.diffusion.learning_rate = 5e-3;
    let model = GazeDiffusion::new(&cfg, DType::F32, &Device::Cpu).unwrap();
    let images = vec![panorama(16, 3), panorama(16, 11)];
    let pairs: Vec<_> = (0..32).map(|i| (sweep(12, i as f64 * 0.1, "img"), i % 2)).collect();
    let data = TrainingSet::new(&model, &images, &pairs).unwrap();
    let mut trainer = Trainer::new(model);
    let before = trainer.dataset_loss(&data, 99).unwrap();
    let stats = trainer.train_epoch(&data).unwrap();
    let after = trainer.dataset_loss(&data, 99).unwrap();
    assert_eq!(stats.epoch, 1);
    assert_eq!(stats.steps, 16);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn empty_training_set_is_rejected() {
    let model = GazeDiffusion::new(&tiny_config(), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(TrainingSet::new(&model, &[panorama(16, 1)], &[]), Err(ModelError::DataEmpty)));
}

#[test]
fn mismatched_lengths_are_rejected() {
    let model = GazeDiffusion::new(&tiny_config(), DType::F32, &Device::Cpu).unwrap();
    let pairs = vec![(sweep(12, 0.0, "a"), 0), (sweep(13, 0.0, "a"), 0)];
    assert!(matches!(
        TrainingSet::new(&model, &[panorama(16, 1)], &pairs),
        Err(ModelError::ShapeMismatch { .. })
    ));
}

#[test]
fn learning_rate_follows_milestones() {
    let model = GazeDiffusion::new(&tiny_config(), DType::F32, &Device::Cpu).unwrap();
    let data = tiny_data(&model);
    let mut trainer = Trainer::new(model);
    let lrs: Vec<f64> = trainer.train(&data, |_, _| Ok(())).unwrap().iter().map(|s| s.learning_rate).collect();
    assert_eq!(lrs.len(), 3);
    assert_eq!(lrs[0], 1e-3);
    assert_eq!(lrs[1], 1e-3);
    assert!((lrs[2] - 1e-4).abs() < 1e-15);
}

#[test]
fn samples_are_unit_length_and_diverse() {
    let model = GazeDiffusion::new(&tiny_config(), DType::F32, &Device::Cpu).unwrap();
    let out = model.sample_sequences(&panorama(16, 4), "img", 20, 30.0, &[1, 2]).unwrap();
    assert_eq!(out.len(), 2);
    for (seq, drift) in &out {
        assert_eq!(seq.len(), 20);
        assert!(drift.is_finite());
        assert!(seq.points.iter().all(|p| (p.norm() - 1.0).abs() < 1e-9 && p.x.is_finite()));
    }
    assert_ne!(out[0].0.points, out[1].0.points);
    let again = model.sample_sequences(&panorama(16, 4), "img", 20, 30.0, &[2]).unwrap();
    assert_eq!(again[0].0.points, out[1].0.points);
}

#[test]
fn checkpoint_round_trip_reproduces_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let model = GazeDiffusion::new(&tiny_config(), DType::F32, &Device::Cpu).unwrap();
    let data = tiny_data(&model);
    let mut trainer = Trainer::new(model);
    trainer.train_epoch(&data).unwrap();
    trainer.save(&path).unwrap();
    let info = read_checkpoint_info(&path).unwrap();
    assert_eq!(info.format_version, CHECKPOINT_VERSION);
    assert_eq!(info.epoch, 1);
    assert_eq!(info.config, tiny_config());
    let loaded = Trainer::load(&path, &Device::Cpu).unwrap();
    for ((n1, v1), (n2, v2)) in trainer.model.params().vars().zip(loaded.model.params().vars()) {
        assert_eq!(n1, n2);
        assert_eq!(max_abs_diff(v1.as_tensor(), v2.as_tensor()), 0.0);
    }
    let img = panorama(16, 6);
    let a = trainer.model.sample_sequences(&img, "x", 10, 30.0, &[5]).unwrap();
    let b = loaded.model.sample_sequences(&img, "x", 10, 30.0, &[5]).unwrap();
    assert_eq!(a[0].0.points, b[0].0.points);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let model = GazeDiffusion::new(&tiny_config(), DType::F32, &Device::Cpu).unwrap();
    let data = tiny_data(&model);
    let mut straight = Trainer::new(model);
    straight.train_epoch(&data).unwrap();
    straight.save(&path).unwrap();
    straight.train_epoch(&data).unwrap();

    let mut resumed = Trainer::load(&path, &Device::Cpu).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.train_epoch(&data).unwrap();
    assert_eq!(resumed.adam.step, straight.adam.step);
    for ((_, a), (_, b)) in straight.model.params().vars().zip(resumed.model.params().vars()) {
        assert_eq!(max_abs_diff(a.as_tensor(), b.as_tensor()), 0.0);
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(Trainer::load(&path, &Device::Cpu), Err(ModelError::Checkpoint { .. })));
}
