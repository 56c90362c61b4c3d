use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use gazediff_core::dataset::{read_sequence_csv, GazeSequence};
use gazediff_core::events::{compute_stats, detect_events, scanpath_from_events, write_scanpath_csv, EventKind, EyeStats};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::files::{csv_groups, read_groups, stem, write_json};

#[derive(Serialize)]
struct EventSummary {
    image_id: String,
    observer_id: String,
    saccades: usize,
    fixations_detected: usize,
    fixations_kept: usize,
    scanpath: String,
}

pub fn load_sequences(dir: &Path) -> Result<BTreeMap<String, Vec<GazeSequence>>> {
    read_groups(&csv_groups(dir)?, read_sequence_csv)
}

pub fn run_detect(cfg: &RunConfig, input: &Path) -> Result<()> {
    let groups = load_sequences(input)?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("scanpaths"));
    let jobs: Vec<(&String, &GazeSequence)> = groups.iter().flat_map(|(img, seqs)| seqs.iter().map(move |s| (img, s))).collect();
    let summaries: Vec<Result<EventSummary>> = jobs
        .par_iter()
        .map(|&(image, seq)| {
            let events = detect_events(seq, &cfg.detector)?;
            let sp = scanpath_from_events(seq, &events, cfg.min_fixation_s)?;
            let rel = format!("{image}/{}.csv", seq.source.observer);
            write_scanpath_csv(&out.join(&rel), &sp)?;
            Ok(EventSummary {
                image_id: image.clone(),
                observer_id: seq.source.observer.clone(),
                saccades: events.iter().filter(|e| e.kind == EventKind::Saccade).count(),
                fixations_detected: events.iter().filter(|e| e.kind == EventKind::Fixation).count(),
                fixations_kept: sp.len(),
                scanpath: rel,
            })
        })
        .collect();
    let summaries = summaries.into_iter().collect::<Result<Vec<_>>>()?;
    write_json(&out.join("events.json"), &summaries)?;
    cfg.write_next_to(&out)?;
    println!("{} scanpaths -> {}", summaries.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    source: PathBuf,
    overall: EyeStats,
    per_image: BTreeMap<String, EyeStats>,
}

pub fn run_stats(cfg: &RunConfig, input: &Path) -> Result<()> {
    let groups = load_sequences(input)?;
    let all: Vec<GazeSequence> = groups.values().flatten().cloned().collect();
    let overall = compute_stats(&all, &cfg.detector)?;
    let per_image = groups
        .iter()
        .map(|(k, v)| Ok((k.clone(), compute_stats(v, &cfg.detector)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let report = StatsReport {
        source: input.to_path_buf(),
        overall,
        per_image,
    };
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("stats"));
    let path = out.join(format!("{}.stats.json", stem(input)));
    write_json(&path, &report)?;
    cfg.write_next_to(&out)?;
    let s = &report.overall;
    println!(
        "{} sequences: saccades {:.2} ± {:.2}, saccade velocity {:.1} ± {:.1} deg/s, fixations {:.2} ± {:.2}, fixation duration {:.3} ± {:.3} s",
        s.sequences,
        s.mean_saccade_number.mean,
        s.mean_saccade_number.sd,
        s.mean_saccade_velocity.mean,
        s.mean_saccade_velocity.sd,
        s.mean_fixation_number.mean,
        s.mean_fixation_number.sd,
        s.mean_fixation_duration.mean,
        s.mean_fixation_duration.sd
    );
    println!("wrote {}", path.display());
    Ok(())
}
