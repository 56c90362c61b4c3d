mod config;
mod detect;
mod evaluate;
mod files;
mod font;
mod preprocess;
mod render;
mod sample;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{parse_override, RunConfig};
use evaluate::EvalKind;
use gazediff_model::diffusion::DiffusionConfig;
use render::RenderKind;

#[derive(Parser)]
#[command(name = "gazediff", version, about = "Diffusion-based gaze sequence generation on 360° panoramas")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON or flat `dotted.key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set model.diffusion.batch_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    set: Vec<(String, Value)>,
    /// Base seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, downsample and split raw recordings into a processed cache.
    Preprocess {
        /// Recordings laid out as `<raw>/<image_id>/<observer_id>.csv`.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Directory of `<image_id>.{png,jpg}` panoramas.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Split specification JSON.
        #[arg(long)]
        split: Option<PathBuf>,
        /// sitzmann, salient360 or custom.
        #[arg(long)]
        dataset: Option<String>,
        /// Native recording rate in Hz.
        #[arg(long)]
        native_rate: Option<f64>,
    },
    /// Train the model on the cache's training split.
    Train {
        /// Processed cache (defaults to $GAZEDIFF_CACHE, then ./cache).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        limit_sequences: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from the output directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate gaze sequences for one panorama.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Samples per sequence; defaults to the preprocessing target length.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Detect fixations and saccades and write scanpaths.
    DetectEvents {
        /// A sequence CSV or a directory of `<image_id>/<observer>.csv`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compute metric reports against ground truth.
    Evaluate {
        #[arg(value_enum)]
        kind: EvalKind,
        /// Generated data; not needed with --human-baseline.
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        /// Leave-one-out agreement among ground-truth items.
        #[arg(long)]
        human_baseline: bool,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Eye-movement statistics of a set of sequences.
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Draw a sequence, scanpath or saliency overlay on a panorama.
    Render {
        #[arg(value_enum)]
        kind: RenderKind,
        /// Sequence/scanpath CSVs, or one saliency metadata JSON.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Output PNG path (default: inside --out).
        #[arg(long)]
        png: Option<PathBuf>,
    },
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn resolve(common: &Common, extra: Vec<(&str, Value)>) -> Result<RunConfig> {
    let mut overrides: Vec<(String, Value)> = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), json!(seed)));
    }
    if let Some(out) = &common.out {
        overrides.push(("output_dir".into(), path_value(out)));
    }
    overrides.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn some<T: serde::Serialize>(key: &'static str, v: &Option<T>) -> Option<(&'static str, Value)> {
    v.as_ref().map(|v| (key, json!(v)))
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    match cli.command {
        Command::Preprocess { raw, images, split, dataset, native_rate } => {
            let mut extra: Vec<_> = [
                some("raw_dir", &raw),
                some("image_dir", &images),
                some("split_file", &split),
                some("dataset", &dataset),
                some("native_rate", &native_rate),
            ]
            .into_iter()
            .flatten()
            .collect();
            if let Some(out) = &common.out {
                extra.push(("cache_dir", path_value(out)));
            }
            preprocess::run(&resolve(&common, extra)?)
        }
        Command::Train { cache, epochs, limit_sequences, checkpoint_every, resume } => {
            let mut cfg = resolve(
                &common,
                [
                    some("cache_dir", &cache),
                    some("train.limit_sequences", &limit_sequences),
                    some("train.checkpoint_every", &checkpoint_every),
                ]
                .into_iter()
                .flatten()
                .collect(),
            )?;
            if let Some(e) = epochs {
                // milestones keep their relative position in the schedule
                let d = &mut cfg.model.diffusion;
                d.epochs = e;
                d.lr_decay_epochs = DiffusionConfig::for_epochs(e).lr_decay_epochs;
            }
            train::run(&cfg, resume)
        }
        Command::Sample { checkpoint, image, n, length } => {
            let cfg = resolve(&common, [some("sample.n", &n), some("sample.length", &length)].into_iter().flatten().collect())?;
            sample::run(&cfg, &checkpoint, &image)
        }
        Command::DetectEvents { input } => detect::run_detect(&resolve(&common, vec![])?, &input),
        Command::Evaluate { kind, gen, gt, human_baseline, height, width } => {
            let cfg = resolve(
                &common,
                [some("evaluation.height", &height), some("evaluation.width", &width)].into_iter().flatten().collect(),
            )?;
            evaluate::run(&cfg, kind, gen.as_deref(), &gt, human_baseline)
        }
        Command::Stats { input } => detect::run_stats(&resolve(&common, vec![])?, &input),
        Command::Render { kind, input, image, alpha, png } => {
            render::run(&resolve(&common, vec![])?, kind, &input, &image, alpha, png.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(files::exit_code(&err) as u8)
        }
    }
}
