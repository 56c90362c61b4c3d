//! Run configuration: defaults, then a `--config` file (JSON or flat
//! `key = value` lines with dotted keys), then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gazediff_core::dataset::{DatasetKind, PreprocessConfig, RecordingFormat};
use gazediff_core::events::{DetectorConfig, DEFAULT_MIN_FIXATION_S};
use gazediff_core::metrics::QuantGrid;
use gazediff_core::saliency::DEFAULT_SIGMA_DEG;
use gazediff_model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CACHE_ENV: &str = "GAZEDIFF_CACHE";
pub const EFFECTIVE_CONFIG: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Image-space resolution for sequence and scanpath metrics. Falls back
    /// to the dataset default when unset.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub quant_grid: QuantGrid,
    pub rec_threshold_deg: f64,
    /// Wrap horizontal pixel distances across the seam.
    pub wrap: bool,
    pub saliency_height: Option<usize>,
    pub saliency_width: Option<usize>,
    pub saliency_sigma_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            height: None,
            width: None,
            quant_grid: QuantGrid::default(),
            rec_threshold_deg: 2.0,
            wrap: false,
            saliency_height: None,
            saliency_width: None,
            saliency_sigma_deg: DEFAULT_SIGMA_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub checkpoint_every: usize,
    pub limit_sequences: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 50,
            limit_sequences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    /// Defaults to the preprocessing target length.
    pub length: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 100, length: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// `<raw_dir>/<image_id>/<observer_id>.csv`
    pub raw_dir: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub split_file: Option<PathBuf>,
    /// Processed cache root; the environment variable is consulted when unset.
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Native recording rate; the dataset default (or inference) when unset.
    pub native_rate: Option<f64>,
    /// Dataset preset when unset.
    pub preprocess: Option<PreprocessConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub detector: DetectorConfig,
    pub min_fixation_s: f64,
    pub evaluation: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Sitzmann,
            raw_dir: None,
            image_dir: None,
            split_file: None,
            cache_dir: None,
            output_dir: None,
            native_rate: None,
            preprocess: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            detector: DetectorConfig::default(),
            min_fixation_s: DEFAULT_MIN_FIXATION_S,
            evaluation: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `file` (if any) and then `overrides`
    /// (`dotted.key=value` pairs).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let layer = parse_config_text(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, layer);
        }
        for (key, v) in overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        serde_json::from_value(value).context("invalid configuration")
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        self.preprocess.clone().unwrap_or_else(|| match self.dataset {
            DatasetKind::Salient360 => PreprocessConfig::salient360(),
            _ => PreprocessConfig::sitzmann(),
        })
    }

    pub fn recording_format(&self) -> RecordingFormat {
        match (self.native_rate, self.dataset) {
            (Some(r), _) => RecordingFormat { sample_rate: Some(r) },
            (None, DatasetKind::Sitzmann) => RecordingFormat::sitzmann(),
            (None, DatasetKind::Salient360) => RecordingFormat::salient360(),
            (None, DatasetKind::Custom) => RecordingFormat::default(),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("cache"))
    }

    /// `(height, width)` for sequence and scanpath metrics.
    pub fn eval_resolution(&self) -> (usize, usize) {
        let (h, w) = match self.dataset {
            DatasetKind::Sitzmann => (4096, 8192),
            DatasetKind::Salient360 => (1024, 2048),
            DatasetKind::Custom => (self.model.encoder.height, self.model.encoder.width),
        };
        (self.evaluation.height.unwrap_or(h), self.evaluation.width.unwrap_or(w))
    }

    pub fn saliency_resolution(&self) -> (usize, usize) {
        let (h, w) = self.eval_resolution();
        (
            self.evaluation.saliency_height.unwrap_or(h),
            self.evaluation.saliency_width.unwrap_or(w),
        )
    }

    /// Writes the effective configuration as `<dir>/run_config.json`.
    pub fn write_next_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn parse_config_text(text: &str) -> Result<Value> {
    if text.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(text)?);
    }
    let mut out = Value::Object(Default::default());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, raw)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", n + 1);
        };
        set_dotted(&mut out, key.trim(), parse_scalar(raw.trim()))?;
    }
    Ok(out)
}

/// JSON when it parses as such, otherwise a plain string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("malformed key `{key}`");
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), parse_scalar(v.trim())))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, Value) {
        parse_override(&format!("{k}={v}")).unwrap()
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn flat_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed = 5\nmodel.diffusion.epochs = 7\ndataset = salient360\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[ov("seed", "9")]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.diffusion.epochs, 7);
        assert_eq!(cfg.dataset, DatasetKind::Salient360);
        assert_eq!(cfg.preprocess_config(), PreprocessConfig::salient360());
        assert_eq!(cfg.eval_resolution(), (1024, 2048));
    }

    #[test]
    fn json_file_merges_partially() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"evaluation": {"quant_grid": {"rows": 4, "cols": 8}}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(cfg.evaluation.quant_grid, QuantGrid { rows: 4, cols: 8 });
        assert_eq!(cfg.evaluation.rec_threshold_deg, 2.0);
    }

    #[test]
    fn bad_values_are_errors() {
        assert!(RunConfig::resolve(None, &[ov("seed", "abc")]).is_err());
        assert!(RunConfig::resolve(None, &[ov("sede", "1")]).is_err());
        assert!(RunConfig::resolve(None, &[ov("a..b", "1")]).is_err());
    }

    #[test]
    fn effective_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(None, &[ov("train.limit_sequences", "4")]).unwrap();
        let path = cfg.write_next_to(dir.path()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }
}
