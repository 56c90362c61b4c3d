use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use gazediff_core::events::{read_scanpath_csv, Scanpath};
use gazediff_core::geometry::PixelCoord;
use gazediff_core::metrics::{
    best_mean, dtw, human_baseline_image, latlons_to_pixels, levenshtein, mae, recurrence, rmse, saliency_metrics,
    to_pixels, BestMean, Direction, MetricError, QuantGrid, SaliencyScores,
};
use gazediff_core::saliency::{accumulate_fixations, blur_to_saliency, export_map, SaliencyMap};
use serde::Serialize;

use crate::config::RunConfig;
use crate::detect::load_sequences;
use crate::files::{csv_groups, read_groups, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalKind {
    Sequences,
    Scanpaths,
    Saliency,
}

#[derive(Serialize)]
pub struct ImageReport {
    pub image_id: String,
    pub generated: usize,
    pub ground_truth: usize,
    /// Empty scanpaths left out of the comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_empty: Option<usize>,
    /// Set when MAE/RMSE compared sequences truncated to a common length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncated_to: Option<usize>,
    pub metrics: BTreeMap<String, BestMean>,
}

#[derive(Serialize)]
pub struct TableReport {
    pub kind: &'static str,
    pub mode: &'static str,
    pub resolution: [usize; 2],
    pub quant_grid: QuantGrid,
    pub wrap: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec_threshold_deg: Option<f64>,
    pub generated_dir: Option<PathBuf>,
    pub ground_truth_dir: PathBuf,
    pub images: Vec<ImageReport>,
    pub aggregate: BTreeMap<String, BestMean>,
}

#[derive(Serialize)]
pub struct SaliencyImageReport {
    pub image_id: String,
    pub generated_fixations: u64,
    pub ground_truth_fixations: u64,
    pub scores: SaliencyScores,
}

#[derive(Serialize)]
pub struct SaliencyReport {
    pub kind: &'static str,
    pub resolution: [usize; 2],
    pub sigma_deg: f64,
    pub generated_dir: PathBuf,
    pub ground_truth_dir: PathBuf,
    pub images: Vec<SaliencyImageReport>,
    pub aggregate: SaliencyScores,
}

/// Either generated-vs-truth or leave-one-out over the truth alone.
fn score<T: Sync>(gen: Option<&[T]>, gt: &[T], metric: impl Fn(&T, &T) -> Result<f64, MetricError> + Sync, dir: Direction) -> Result<BestMean> {
    Ok(match gen {
        Some(g) => best_mean(g, gt, metric, dir)?,
        None => human_baseline_image(gt, metric, dir)?,
    })
}

fn average(images: &[ImageReport]) -> BTreeMap<String, BestMean> {
    let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for img in images {
        for (k, v) in &img.metrics {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v.best;
            e.1 += v.mean;
        }
    }
    let n = images.len() as f64;
    sums.into_iter().map(|(k, (b, m))| (k, BestMean { best: b / n, mean: m / n })).collect()
}

/// Image ids present in the truth (and the generated set, if any).
fn paired_ids<A, B>(gen: Option<&BTreeMap<String, A>>, gt: &BTreeMap<String, B>) -> Result<Vec<String>> {
    let ids: Vec<String> = gt.keys().filter(|k| gen.is_none_or(|g| g.contains_key(*k))).cloned().collect();
    if ids.is_empty() {
        bail!("no image has both generated and ground-truth data");
    }
    Ok(ids)
}

pub fn evaluate_sequences(cfg: &RunConfig, gen_dir: Option<&Path>, gt_dir: &Path) -> Result<TableReport> {
    let (h, w) = cfg.eval_resolution();
    let grid = cfg.evaluation.quant_grid;
    let wrap = cfg.evaluation.wrap;
    let to_px = |m: BTreeMap<String, Vec<_>>| -> BTreeMap<String, Vec<Vec<PixelCoord>>> {
        m.into_iter().map(|(k, v)| (k, v.iter().map(|s| to_pixels(s, h, w)).collect())).collect()
    };
    let gt = to_px(load_sequences(gt_dir)?);
    let gen = gen_dir.map(load_sequences).transpose()?.map(to_px);
    let mut images = Vec::new();
    for id in paired_ids(gen.as_ref(), &gt)? {
        let truth = &gt[&id];
        let generated = gen.as_ref().map(|g| g[&id].as_slice());
        let lens = truth.iter().chain(generated.into_iter().flatten()).map(Vec::len);
        let common = lens.clone().min().unwrap_or(0);
        let truncated_to = (lens.clone().max() != Some(common)).then_some(common);
        let cut = |a: &Vec<PixelCoord>| a[..common].to_vec();
        let mut metrics = BTreeMap::new();
        metrics.insert("LEV".into(), score(generated, truth, |a, b| Ok(levenshtein(a, b, grid) as f64), Direction::Lower)?);
        metrics.insert("DTW".into(), score(generated, truth, |a, b| dtw(a, b, wrap), Direction::Lower)?);
        metrics.insert("MAE".into(), score(generated, truth, |a, b| mae(&cut(a), &cut(b), wrap), Direction::Lower)?);
        metrics.insert("RMSE".into(), score(generated, truth, |a, b| rmse(&cut(a), &cut(b), wrap), Direction::Lower)?);
        images.push(ImageReport {
            image_id: id.clone(),
            generated: generated.map_or(0, <[_]>::len),
            ground_truth: truth.len(),
            skipped_empty: None,
            truncated_to,
            metrics,
        });
    }
    Ok(TableReport {
        kind: "sequences",
        mode: if gen.is_some() { "generated" } else { "human_baseline" },
        resolution: [h, w],
        quant_grid: grid,
        wrap,
        rec_threshold_deg: None,
        generated_dir: gen_dir.map(Path::to_path_buf),
        ground_truth_dir: gt_dir.to_path_buf(),
        aggregate: average(&images),
        images,
    })
}

fn load_scanpaths(dir: &Path) -> Result<BTreeMap<String, Vec<Scanpath>>> {
    read_groups(&csv_groups(dir)?, read_scanpath_csv)
}

pub fn evaluate_scanpaths(cfg: &RunConfig, gen_dir: Option<&Path>, gt_dir: &Path) -> Result<TableReport> {
    let (h, w) = cfg.eval_resolution();
    let grid = cfg.evaluation.quant_grid;
    let wrap = cfg.evaluation.wrap;
    let threshold = cfg.evaluation.rec_threshold_deg;
    let gt = load_scanpaths(gt_dir)?;
    let gen = gen_dir.map(load_scanpaths).transpose()?;
    let mut images = Vec::new();
    for id in paired_ids(gen.as_ref(), &gt)? {
        let split = |v: &[Scanpath]| -> (Vec<(Scanpath, Vec<PixelCoord>)>, usize) {
            let kept: Vec<_> = v
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| (s.clone(), latlons_to_pixels(&s.centroids(), h, w)))
                .collect();
            let skipped = v.len() - kept.len();
            (kept, skipped)
        };
        let (truth, mut skipped) = split(&gt[&id]);
        let generated = gen.as_ref().map(|g| {
            let (kept, s) = split(&g[&id]);
            skipped += s;
            kept
        });
        if truth.is_empty() || generated.as_ref().is_some_and(Vec::is_empty) {
            bail!("image `{id}` has no non-empty scanpaths to compare");
        }
        let generated_ref = generated.as_deref();
        let mut metrics = BTreeMap::new();
        metrics.insert("LEV".into(), score(generated_ref, &truth, |a, b| Ok(levenshtein(&a.1, &b.1, grid) as f64), Direction::Lower)?);
        metrics.insert("DTW".into(), score(generated_ref, &truth, |a, b| dtw(&a.1, &b.1, wrap), Direction::Lower)?);
        metrics.insert("REC".into(), score(generated_ref, &truth, |a, b| recurrence(&a.0, &b.0, threshold), Direction::Higher)?);
        images.push(ImageReport {
            image_id: id.clone(),
            generated: generated_ref.map_or(0, <[_]>::len),
            ground_truth: truth.len(),
            skipped_empty: Some(skipped),
            truncated_to: None,
            metrics,
        });
    }
    Ok(TableReport {
        kind: "scanpaths",
        mode: if gen.is_some() { "generated" } else { "human_baseline" },
        resolution: [h, w],
        quant_grid: grid,
        wrap,
        rec_threshold_deg: Some(threshold),
        generated_dir: gen_dir.map(Path::to_path_buf),
        ground_truth_dir: gt_dir.to_path_buf(),
        aggregate: average(&images),
        images,
    })
}

fn saliency_of(paths: &[Scanpath], size: (usize, usize), sigma: f64) -> Result<(SaliencyMap, u64)> {
    let fmap = accumulate_fixations(paths, size);
    let total = fmap.total();
    Ok((blur_to_saliency(&fmap, sigma)?, total))
}

pub fn evaluate_saliency(cfg: &RunConfig, gen_dir: &Path, gt_dir: &Path, export: Option<&Path>) -> Result<SaliencyReport> {
    let size = cfg.saliency_resolution();
    let sigma = cfg.evaluation.saliency_sigma_deg;
    let gt = load_scanpaths(gt_dir)?;
    let gen = load_scanpaths(gen_dir)?;
    let mut images = Vec::new();
    for id in paired_ids(Some(&gen), &gt)? {
        let (pred, n_gen) = saliency_of(&gen[&id], size, sigma)?;
        let (truth, n_gt) = saliency_of(&gt[&id], size, sigma)?;
        let fixations = Scanpath {
            fixations: gt[&id].iter().flat_map(|s| s.fixations.iter().cloned()).collect(),
        };
        let scores = saliency_metrics(&pred, &truth, &fixations)?;
        if let Some(dir) = export {
            export_map(dir, &format!("{id}_generated"), &pred, sigma, n_gen)?;
            export_map(dir, &format!("{id}_ground_truth"), &truth, sigma, n_gt)?;
        }
        images.push(SaliencyImageReport {
            image_id: id,
            generated_fixations: n_gen,
            ground_truth_fixations: n_gt,
            scores,
        });
    }
    let n = images.len() as f64;
    let mean = |f: fn(&SaliencyScores) -> f64| images.iter().map(|i| f(&i.scores)).sum::<f64>() / n;
    let aggregate = SaliencyScores {
        auc: mean(|s| s.auc),
        nss: mean(|s| s.nss),
        cc: mean(|s| s.cc),
        sim: mean(|s| s.sim),
        kl: mean(|s| s.kl),
    };
    Ok(SaliencyReport {
        kind: "saliency",
        resolution: [size.0, size.1],
        sigma_deg: sigma,
        generated_dir: gen_dir.to_path_buf(),
        ground_truth_dir: gt_dir.to_path_buf(),
        images,
        aggregate,
    })
}

pub fn run(cfg: &RunConfig, kind: EvalKind, gen_dir: Option<&Path>, gt_dir: &Path, human_baseline: bool) -> Result<()> {
    let gen_dir = if human_baseline { None } else { gen_dir };
    if !human_baseline && gen_dir.is_none() {
        bail!("--gen is required unless --human-baseline is given");
    }
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("reports"));
    let suffix = if human_baseline { "_human" } else { "" };
    let path = match kind {
        EvalKind::Sequences => {
            let report = evaluate_sequences(cfg, gen_dir, gt_dir)?;
            let path = out.join(format!("sequences{suffix}.json"));
            write_json(&path, &report)?;
            print_table(&report);
            path
        }
        EvalKind::Scanpaths => {
            let report = evaluate_scanpaths(cfg, gen_dir, gt_dir)?;
            let path = out.join(format!("scanpaths{suffix}.json"));
            write_json(&path, &report)?;
            print_table(&report);
            path
        }
        EvalKind::Saliency => {
            if human_baseline {
                bail!("saliency evaluation has no human-baseline mode");
            }
            let gen_dir = gen_dir.expect("checked above");
            let report = evaluate_saliency(cfg, gen_dir, gt_dir, Some(&out.join("maps")))?;
            let path = out.join("saliency.json");
            write_json(&path, &report)?;
            let a = &report.aggregate;
            println!("AUC {:.3}  NSS {:.3}  CC {:.3}  SIM {:.3}  KL {:.3}", a.auc, a.nss, a.cc, a.sim, a.kl);
            path
        }
    };
    cfg.write_next_to(&out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_table(report: &TableReport) {
    println!(
        "{} ({}) at {}x{}, grid {}x{}",
        report.kind, report.mode, report.resolution[0], report.resolution[1], report.quant_grid.rows, report.quant_grid.cols
    );
    for (k, v) in &report.aggregate {
        println!("  {k:<5} best {:>12.3}  mean {:>12.3}", v.best, v.mean);
    }
}
