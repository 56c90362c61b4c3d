use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use gazediff_core::dataset::{read_sequence_csv, resize_panorama, Manifest, Panorama, SplitRole};
use gazediff_model::{GazeDiffusion, ModelConfig, Trainer, TrainingSet};
use serde::Serialize;

use crate::config::RunConfig;
use crate::files::{require, write_json};

pub const LAST_CHECKPOINT: &str = "checkpoint_last.safetensors";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";
pub const LOSS_CSV: &str = "loss.csv";
const LOSS_HEADER: &str = "epoch,mean_loss,learning_rate,steps";

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    final_learning_rate: f64,
    final_loss: Option<f64>,
    sequences: usize,
    images: usize,
    sequence_length: usize,
    seed: u64,
    resumed_from_epoch: Option<usize>,
    checkpoint: PathBuf,
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.encoder == b.encoder
        && a.denoiser == b.denoiser
        && a.seed == b.seed
        && a.diffusion.steps == b.diffusion.steps
        && a.diffusion.beta_min == b.diffusion.beta_min
        && a.diffusion.beta_max == b.diffusion.beta_max
}

/// Loss rows up to and including `epoch` from an earlier run.
fn kept_loss_rows(path: &Path, epoch: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect())
}

pub fn run(cfg: &RunConfig, resume: bool) -> Result<()> {
    let cache = cfg.cache_dir();
    require(&cache)?;
    let manifest = Manifest::load(&cache)?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut entries: Vec<_> = manifest.entries(SplitRole::Train).collect();
    if let Some(n) = cfg.train.limit_sequences {
        entries.truncate(n);
    }
    if entries.is_empty() {
        bail!("{} has no training sequences", cache.display());
    }

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let size = (model_cfg.encoder.height as u32, model_cfg.encoder.width as u32);
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut images = Vec::new();
    let mut pairs = Vec::new();
    for e in &entries {
        let next = index.len();
        let slot = *index.entry(e.image_id.as_str()).or_insert(next);
        if slot == images.len() {
            let file = manifest
                .images
                .iter()
                .find(|i| i.image_id == e.image_id)
                .and_then(|i| i.file.as_ref())
                .with_context(|| format!("cache has no panorama for image `{}`", e.image_id))?;
            let path = cache.join(file);
            require(&path)?;
            images.push(resize_panorama(&Panorama::load(&path)?, size)?);
        }
        pairs.push((read_sequence_csv(&cache.join(&e.file))?, slot));
    }

    let last = out.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.exists() {
        let mut t = Trainer::load(&last, &Device::Cpu)?;
        if !same_architecture(&t.model.config, &model_cfg) {
            bail!("{} was trained with a different model configuration", last.display());
        }
        t.model.config.diffusion = model_cfg.diffusion.clone();
        t
    } else {
        Trainer::new(GazeDiffusion::new(&model_cfg, DType::F32, &Device::Cpu)?)
    };
    let resumed_from = resume.then_some(trainer.epoch).filter(|&e| e > 0);
    let data = TrainingSet::new(&trainer.model, &images, &pairs)?;

    let loss_path = out.join(LOSS_CSV);
    let mut rows = if resumed_from.is_some() {
        kept_loss_rows(&loss_path, trainer.epoch)?
    } else {
        Vec::new()
    };
    let mut loss_file = fs::File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    rows.insert(0, LOSS_HEADER.to_string());
    writeln!(loss_file, "{}", rows.join("\n"))?;

    let mut effective = cfg.clone();
    effective.model = trainer.model.config.clone();
    effective.write_next_to(&out)?;

    let total = trainer.model.config.diffusion.epochs;
    let every = cfg.train.checkpoint_every.max(1);
    let mut last_loss = None;
    let started = Instant::now();
    println!("training on {} sequences of {} images, epochs {}..{}", data.len(), images.len(), trainer.epoch + 1, total);
    while trainer.epoch < total {
        let stats = trainer.train_epoch(&data)?;
        writeln!(loss_file, "{},{},{},{}", stats.epoch, stats.mean_loss, stats.learning_rate, stats.steps)?;
        loss_file.flush()?;
        last_loss = Some(stats.mean_loss);
        if stats.epoch % every == 0 || stats.epoch == total {
            trainer.save(&out.join("checkpoints").join(format!("epoch_{:04}.safetensors", stats.epoch)))?;
        }
        trainer.save(&last)?;
        println!(
            "epoch {:>4}  loss {:.5}  lr {:.1e}  {:.0?}",
            stats.epoch,
            stats.mean_loss,
            stats.learning_rate,
            started.elapsed()
        );
    }
    let checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.save(&checkpoint)?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            epochs: trainer.epoch,
            final_learning_rate: trainer.model.config.diffusion.lr_at(trainer.epoch.max(1)),
            final_loss: last_loss,
            sequences: data.len(),
            images: images.len(),
            sequence_length: data.sequence_len(),
            seed: cfg.seed,
            resumed_from_epoch: resumed_from,
            checkpoint: checkpoint.clone(),
        },
    )?;
    println!("wrote {}", checkpoint.display());
    Ok(())
}
