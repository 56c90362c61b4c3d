use std::path::Path;

use anyhow::{Context, Result};
use gazediff_core::dataset::{
    find_panorama, load_recordings, preprocess, resize_panorama, split_train_test, write_processed_cache, Panorama,
    SplitSpec,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::files::{require, stem};

fn image_ids(raw: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(raw).with_context(|| format!("listing {}", raw.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            ids.push(stem(&path));
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let raw = cfg.raw_dir.as_deref().context("no recordings directory given (--raw)")?;
    require(raw)?;
    if let Some(dir) = &cfg.image_dir {
        require(dir)?;
    }
    let spec = match &cfg.split_file {
        Some(path) => {
            require(path)?;
            SplitSpec::load(path)?
        }
        None => SplitSpec {
            dataset: cfg.dataset,
            test_images: Vec::new(),
            seed: cfg.seed,
        },
    };
    let out = cfg.cache_dir();
    let format = cfg.recording_format();
    let pre = cfg.preprocess_config();
    if let Some(rate) = format.sample_rate {
        pre.validate(rate)?;
    }

    let recordings = load_recordings(raw, &format)?;
    let kept = preprocess(&recordings, &pre)?;
    let split = split_train_test(&image_ids(raw)?, &spec)?;
    let mut manifest = write_processed_cache(&out, &kept, &split, spec.dataset, &pre)?;

    let size = (cfg.model.encoder.height as u32, cfg.model.encoder.width as u32);
    if let Some(dir) = &cfg.image_dir {
        let files: Vec<Result<Option<String>>> = manifest
            .images
            .par_iter()
            .map(|img| {
                let Some(src) = find_panorama(dir, &img.image_id) else {
                    return Ok(None);
                };
                let rel = format!("images/{}.png", img.image_id);
                resize_panorama(&Panorama::load(&src)?, size)?.save(&out.join(&rel))?;
                Ok(Some(rel))
            })
            .collect();
        for (img, file) in manifest.images.iter_mut().zip(files) {
            img.file = file?;
            if img.file.is_none() {
                eprintln!("warning: no panorama for image `{}` in {}", img.image_id, dir.display());
            }
        }
    }
    manifest.save(&out)?;
    cfg.write_next_to(&out)?;
    let train = manifest.sequences.iter().filter(|e| e.split == gazediff_core::dataset::SplitRole::Train).count();
    println!(
        "{} recordings, {} retained ({} train, {} test), length {} at {} Hz -> {}",
        recordings.len(),
        manifest.sequences.len(),
        train,
        manifest.sequences.len() - train,
        pre.target_length,
        pre.target_rate,
        out.display()
    );
    Ok(())
}
