//! Gaze recordings, panoramas, and the preprocessing pipeline.
//!
//! Raw recordings are CSV files laid out as `<root>/<image_id>/<observer_id>.csv`
//! with a header row and the columns `timestamp_s, lat_rad, lon_rad`.
//! Binocular recordings may instead carry `lat_left_rad, lon_left_rad,
//! lat_right_rad, lon_right_rad`; the two eyes are merged into the
//! cyclopean direction (normalized mean of the two unit vectors).
//!
//! Preprocessing is `filter_min_samples -> downsample -> truncate`, after
//! which every retained sequence has exactly `target_length` samples at
//! `target_rate`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{LatLon, UnitVec3};

pub const MANIFEST_VERSION: &str = "gazediff-cache-1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: PathBuf, column: String },
    #[error("cannot decimate {native} Hz to {target} Hz: rates are not integer-divisible")]
    NonIntegerDecimation { native: f64, target: f64 },
    #[error("sequence has {len} samples, cannot truncate to {target}")]
    TooShort { len: usize, target: usize },
    #[error("expected {expected} images, found {found}")]
    WrongImageCount { expected: usize, found: usize },
    #[error("test image `{0}` is not among the supplied images")]
    UnknownTestImage(String),
    #[error("panorama is {height}x{width}, equirectangular images need width = 2 * height")]
    AspectMismatch { height: u32, width: u32 },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceId {
    pub image: String,
    pub observer: String,
}

/// A fixed-rate series of on-sphere gaze samples. Sample `i` is taken at
/// `i / sample_rate` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeSequence {
    pub points: Vec<UnitVec3>,
    pub sample_rate: f64,
    pub source: SourceId,
}

impl GazeSequence {
    pub fn new(
        points: Vec<UnitVec3>,
        sample_rate: f64,
        observer: impl Into<String>,
        image: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        if points.is_empty() {
            return Err(DatasetError::InvalidSequence("sequence is empty".into()));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(DatasetError::InvalidSequence(format!(
                "sample rate {sample_rate} must be positive"
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.norm().is_finite() || (p.norm() - 1.0).abs() > 1e-6)
        {
            return Err(DatasetError::InvalidSequence(format!("sample {i} is not unit-norm")));
        }
        Ok(Self {
            points,
            sample_rate,
            source: SourceId {
                image: image.into(),
                observer: observer.into(),
            },
        })
    }

    pub fn from_latlons(
        latlons: &[LatLon],
        sample_rate: f64,
        observer: impl Into<String>,
        image: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let points = latlons.iter().map(|p| p.to_unit()).collect();
        Self::new(points, sample_rate, observer, image)
    }

    /// Builds a sequence from channel-major `[x_0..x_L, y_0..y_L, z_0..z_L]`
    /// values, projecting each point onto the sphere. Also returns the mean
    /// relative norm change introduced by the projection.
    pub fn from_channel_major(
        values: &[f64],
        sample_rate: f64,
        observer: impl Into<String>,
        image: impl Into<String>,
    ) -> Result<(Self, f64), DatasetError> {
        if values.is_empty() || values.len() % 3 != 0 {
            return Err(DatasetError::InvalidSequence(format!(
                "{} values cannot form a 3xL array",
                values.len()
            )));
        }
        let len = values.len() / 3;
        let mut points = Vec::with_capacity(len);
        let mut drift = 0.0;
        for i in 0..len {
            let (x, y, z) = (values[i], values[len + i], values[2 * len + i]);
            let norm = (x * x + y * y + z * z).sqrt();
            drift += (norm - 1.0).abs();
            let p = UnitVec3::normalize(x, y, z)
                .map_err(|e| DatasetError::InvalidSequence(format!("sample {i}: {e}")))?;
            points.push(p);
        }
        let seq = Self::new(points, sample_rate, observer, image)?;
        Ok((seq, drift / len as f64))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Time between the first and last sample.
    pub fn duration_s(&self) -> f64 {
        (self.len() - 1) as f64 / self.sample_rate
    }

    pub fn timestamp(&self, index: usize) -> f64 {
        index as f64 / self.sample_rate
    }

    pub fn latlons(&self) -> Vec<LatLon> {
        self.points.iter().map(|p| p.to_latlon()).collect()
    }

    /// `[x_0..x_L, y_0..y_L, z_0..z_L]`, the `3 x L` model layout.
    pub fn to_channel_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.len());
        out.extend(self.points.iter().map(|p| p.x));
        out.extend(self.points.iter().map(|p| p.y));
        out.extend(self.points.iter().map(|p| p.z));
        out
    }

    pub fn with_points(&self, points: Vec<UnitVec3>, sample_rate: f64) -> Self {
        Self {
            points,
            sample_rate,
            source: self.source.clone(),
        }
    }
}

/// How to interpret a raw recording file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordingFormat {
    /// Native rate in Hz. When absent it is inferred from the median
    /// timestamp step, rounded to the nearest integer.
    pub sample_rate: Option<f64>,
}

impl RecordingFormat {
    pub fn sitzmann() -> Self {
        Self { sample_rate: Some(120.0) }
    }

    pub fn salient360() -> Self {
        Self { sample_rate: Some(60.0) }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn parse_field(record: &csv::StringRecord, idx: usize, name: &str, file: &Path) -> Result<f64, DatasetError> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(idx).ok_or_else(|| DatasetError::Parse {
        file: file.to_path_buf(),
        line,
        message: format!("row has no `{name}` field"),
    })?;
    let value: f64 = raw.parse().map_err(|_| DatasetError::Parse {
        file: file.to_path_buf(),
        line,
        message: format!("`{name}` value `{raw}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(DatasetError::Parse {
            file: file.to_path_buf(),
            line,
            message: format!("`{name}` value `{raw}` is not finite"),
        });
    }
    Ok(value)
}

/// Reads `(timestamps, points)` from one recording CSV.
pub fn read_recording_csv(path: &Path) -> Result<(Vec<f64>, Vec<UnitVec3>), DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let missing = |column: &str| DatasetError::MissingColumn {
        file: path.to_path_buf(),
        column: column.to_string(),
    };
    let t_idx = column_index(&headers, "timestamp_s").ok_or_else(|| missing("timestamp_s"))?;
    enum Layout {
        Mono(usize, usize),
        Binocular([usize; 4]),
    }
    let layout = match (column_index(&headers, "lat_rad"), column_index(&headers, "lon_rad")) {
        (Some(a), Some(b)) => Layout::Mono(a, b),
        (Some(_), None) => return Err(missing("lon_rad")),
        (None, _) => {
            let names = ["lat_left_rad", "lon_left_rad", "lat_right_rad", "lon_right_rad"];
            let idx: Vec<Option<usize>> = names.iter().map(|n| column_index(&headers, n)).collect();
            if idx.iter().all(Option::is_none) {
                return Err(missing("lat_rad"));
            }
            let mut out = [0; 4];
            for (k, (i, n)) in idx.iter().zip(names).enumerate() {
                out[k] = i.ok_or_else(|| missing(n))?;
            }
            Layout::Binocular(out)
        }
    };

    let mut times = Vec::new();
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        times.push(parse_field(&record, t_idx, "timestamp_s", path)?);
        let p = match layout {
            Layout::Mono(a, b) => {
                let phi = parse_field(&record, a, "lat_rad", path)?;
                let lam = parse_field(&record, b, "lon_rad", path)?;
                LatLon::new(phi, lam).to_unit()
            }
            Layout::Binocular([a, b, c, d]) => {
                let l = LatLon::new(
                    parse_field(&record, a, "lat_left_rad", path)?,
                    parse_field(&record, b, "lon_left_rad", path)?,
                )
                .to_unit();
                let r = LatLon::new(
                    parse_field(&record, c, "lat_right_rad", path)?,
                    parse_field(&record, d, "lon_right_rad", path)?,
                )
                .to_unit();
                UnitVec3::normalize(l.x + r.x, l.y + r.y, l.z + r.z).map_err(|_| DatasetError::Parse {
                    file: path.to_path_buf(),
                    line: record.position().map(|p| p.line()).unwrap_or(0),
                    message: "left and right gaze directions are antipodal".into(),
                })?
            }
        };
        points.push(p);
    }
    Ok((times, points))
}

fn csv_error(path: &Path, e: csv::Error) -> DatasetError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => DatasetError::Parse {
            file: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn infer_rate(times: &[f64], path: &Path) -> Result<f64, DatasetError> {
    let mut steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if steps.is_empty() {
        return Err(DatasetError::Parse {
            file: path.to_path_buf(),
            line: 0,
            message: "need at least two samples to infer the sampling rate".into(),
        });
    }
    steps.sort_by(f64::total_cmp);
    let median = steps[steps.len() / 2];
    if median <= 0.0 {
        return Err(DatasetError::Parse {
            file: path.to_path_buf(),
            line: 0,
            message: "timestamps are not increasing".into(),
        });
    }
    Ok((1.0 / median).round())
}

/// Loads one sequence, taking observer and image ids from the path.
pub fn load_recording(path: &Path, image: &str, format: &RecordingFormat) -> Result<GazeSequence, DatasetError> {
    let (times, points) = read_recording_csv(path)?;
    if points.is_empty() {
        return Err(DatasetError::Parse {
            file: path.to_path_buf(),
            line: 1,
            message: "recording has no samples".into(),
        });
    }
    let rate = match format.sample_rate {
        Some(r) => r,
        None => infer_rate(&times, path)?,
    };
    let observer = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    GazeSequence::new(points, rate, observer, image)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads every `<root>/<image_id>/<observer_id>.csv`, ordered by image then
/// observer.
pub fn load_recordings(root: &Path, format: &RecordingFormat) -> Result<Vec<GazeSequence>, DatasetError> {
    let mut files = Vec::new();
    for image_dir in sorted_entries(root)? {
        if !image_dir.is_dir() {
            continue;
        }
        let image = image_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for file in sorted_entries(&image_dir)? {
            if file.extension().is_some_and(|e| e == "csv") {
                files.push((image.clone(), file));
            }
        }
    }
    files
        .par_iter()
        .map(|(image, file)| load_recording(file, image, format))
        .collect()
}

/// Writes a sequence in the recording schema.
pub fn write_sequence_csv(path: &Path, seq: &GazeSequence) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut out = String::with_capacity(seq.len() * 48);
    out.push_str("timestamp_s,lat_rad,lon_rad\n");
    for (i, p) in seq.latlons().iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", seq.timestamp(i), p.phi, p.lam));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads a sequence written by [`write_sequence_csv`] (or any recording
/// CSV), with ids taken from the path.
pub fn read_sequence_csv(path: &Path) -> Result<GazeSequence, DatasetError> {
    let image = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    load_recording(path, &image, &RecordingFormat::default())
}

/// Sequence lengths and rates of the preprocessing pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    pub min_samples: usize,
    pub target_length: usize,
    pub train_image_count: usize,
}

impl PreprocessConfig {
    pub fn sitzmann() -> Self {
        Self {
            target_rate: 30.0,
            min_samples: 3481,
            target_length: 871,
            train_image_count: 19,
        }
    }

    pub fn salient360() -> Self {
        Self {
            target_rate: 30.0,
            min_samples: 1441,
            target_length: 721,
            train_image_count: 0,
        }
    }

    /// Checks that a recording of `min_samples` at `native_rate` still
    /// covers `target_length` samples after decimation.
    pub fn validate(&self, native_rate: f64) -> Result<(), DatasetError> {
        let k = decimation_factor(native_rate, self.target_rate)?;
        let available = self.min_samples.div_ceil(k);
        if self.target_length == 0 || self.target_length > available {
            return Err(DatasetError::InvalidConfig(format!(
                "target length {} exceeds the {} samples left after decimating {} samples by {}",
                self.target_length, available, self.min_samples, k
            )));
        }
        Ok(())
    }
}

pub fn filter_min_samples(seqs: &[GazeSequence], min_samples: usize) -> Vec<GazeSequence> {
    seqs.iter().filter(|s| s.len() >= min_samples).cloned().collect()
}

fn decimation_factor(native: f64, target: f64) -> Result<usize, DatasetError> {
    let ratio = native / target;
    let k = ratio.round();
    if !(target > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-9 {
        return Err(DatasetError::NonIntegerDecimation { native, target });
    }
    Ok(k as usize)
}

/// Keeps every `k`-th sample starting at index 0, `k = native / target`.
pub fn downsample(seq: &GazeSequence, target_rate: f64) -> Result<GazeSequence, DatasetError> {
    let k = decimation_factor(seq.sample_rate, target_rate)?;
    let points = seq.points.iter().step_by(k).copied().collect();
    Ok(seq.with_points(points, target_rate))
}

/// Keeps the first `target_length` samples.
pub fn truncate(seq: &GazeSequence, target_length: usize) -> Result<GazeSequence, DatasetError> {
    if seq.len() < target_length {
        return Err(DatasetError::TooShort {
            len: seq.len(),
            target: target_length,
        });
    }
    Ok(seq.with_points(seq.points[..target_length].to_vec(), seq.sample_rate))
}

/// `filter_min_samples -> downsample -> truncate`.
pub fn preprocess(seqs: &[GazeSequence], config: &PreprocessConfig) -> Result<Vec<GazeSequence>, DatasetError> {
    filter_min_samples(seqs, config.min_samples)
        .iter()
        .map(|s| truncate(&downsample(s, config.target_rate)?, config.target_length))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Sitzmann,
    Salient360,
    Custom,
}

/// Editable description of the train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset: DatasetKind,
    /// Explicit held-out image ids. When empty for Sitzmann, three images
    /// are drawn with `seed`.
    #[serde(default)]
    pub test_images: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn role(&self, image: &str) -> Option<SplitRole> {
        if self.train.iter().any(|i| i == image) {
            Some(SplitRole::Train)
        } else if self.test.iter().any(|i| i == image) {
            Some(SplitRole::Test)
        } else {
            None
        }
    }
}

const SITZMANN_IMAGES: usize = 22;
const SITZMANN_TEST: usize = SITZMANN_IMAGES - 19;

pub fn split_train_test(images: &[String], spec: &SplitSpec) -> Result<Split, DatasetError> {
    let unique: BTreeSet<&String> = images.iter().collect();
    let sorted: Vec<String> = unique.into_iter().cloned().collect();
    for name in &spec.test_images {
        if !sorted.contains(name) {
            return Err(DatasetError::UnknownTestImage(name.clone()));
        }
    }
    let by_names = |test: &[String]| Split {
        train: sorted.iter().filter(|i| !test.contains(i)).cloned().collect(),
        test: sorted.iter().filter(|i| test.contains(i)).cloned().collect(),
    };
    match spec.dataset {
        DatasetKind::Sitzmann => {
            if sorted.len() != SITZMANN_IMAGES {
                return Err(DatasetError::WrongImageCount {
                    expected: SITZMANN_IMAGES,
                    found: sorted.len(),
                });
            }
            if !spec.test_images.is_empty() {
                if spec.test_images.len() != SITZMANN_TEST {
                    return Err(DatasetError::InvalidConfig(format!(
                        "Sitzmann split needs {SITZMANN_TEST} test images, {} given",
                        spec.test_images.len()
                    )));
                }
                return Ok(by_names(&spec.test_images));
            }
            let mut shuffled = sorted.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            Ok(by_names(&shuffled[..SITZMANN_TEST]))
        }
        DatasetKind::Salient360 => Ok(Split {
            train: Vec::new(),
            test: sorted,
        }),
        DatasetKind::Custom => Ok(by_names(&spec.test_images)),
    }
}

/// An 8-bit RGB equirectangular image.
#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub pixels: RgbImage,
}

impl Panorama {
    pub fn new(pixels: RgbImage) -> Result<Self, DatasetError> {
        let (w, h) = pixels.dimensions();
        if h == 0 || w != 2 * h {
            return Err(DatasetError::AspectMismatch { height: h, width: w });
        }
        Ok(Self { pixels })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::new(img.to_rgb8())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        self.pixels.save(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// `(height, width)`.
    pub fn native_size(&self) -> (usize, usize) {
        let (w, h) = self.pixels.dimensions();
        (h as usize, w as usize)
    }
}

/// Bilinear resample to `(height, width)`.
pub fn resize_panorama(img: &Panorama, size: (u32, u32)) -> Result<Panorama, DatasetError> {
    let (h, w) = size;
    if img.pixels.dimensions() == (w, h) {
        return Ok(img.clone());
    }
    Panorama::new(image::imageops::resize(&img.pixels, w, h, FilterType::Triangle))
}

/// Looks for `<dir>/<image_id>.{png,jpg,jpeg}`.
pub fn find_panorama(dir: &Path, image_id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"]
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub observer_id: String,
    pub file: String,
    pub length: usize,
    pub sample_rate: f64,
    pub split: SplitRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub file: Option<String>,
    pub split: SplitRole,
}

/// Index of a processed cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub dataset: DatasetKind,
    pub preprocess: PreprocessConfig,
    pub images: Vec<ManifestImage>,
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(Self::FILE_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|source| DatasetError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json { path, source })
    }

    pub fn entries(&self, role: SplitRole) -> impl Iterator<Item = &ManifestEntry> {
        self.sequences.iter().filter(move |e| e.split == role)
    }
}

/// Writes processed sequences as `<dir>/sequences/<image>/<observer>.csv`
/// and returns the manifest describing them (images are left for the caller
/// to register). Sequences whose image is not in the split are skipped.
pub fn write_processed_cache(
    dir: &Path,
    seqs: &[GazeSequence],
    split: &Split,
    dataset: DatasetKind,
    preprocess: &PreprocessConfig,
) -> Result<Manifest, DatasetError> {
    let mut entries = Vec::new();
    for seq in seqs {
        let Some(role) = split.role(&seq.source.image) else {
            continue;
        };
        let rel = format!("sequences/{}/{}.csv", seq.source.image, seq.source.observer);
        write_sequence_csv(&dir.join(&rel), seq)?;
        entries.push(ManifestEntry {
            image_id: seq.source.image.clone(),
            observer_id: seq.source.observer.clone(),
            file: rel,
            length: seq.len(),
            sample_rate: seq.sample_rate,
            split: role,
        });
    }
    let images = split
        .train
        .iter()
        .map(|i| (i, SplitRole::Train))
        .chain(split.test.iter().map(|i| (i, SplitRole::Test)))
        .map(|(id, split)| ManifestImage {
            image_id: id.clone(),
            file: None,
            split,
        })
        .collect();
    Ok(Manifest {
        format_version: MANIFEST_VERSION.to_string(),
        dataset,
        preprocess: preprocess.clone(),
        images,
        sequences: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use std::io::Write;

    fn seq_of_len(n: usize, rate: f64) -> GazeSequence {
        let pts = (0..n)
            .map(|i| LatLon::new(0.1, i as f64 * 1e-3).to_unit())
            .collect();
        GazeSequence::new(pts, rate, "o", "i").unwrap()
    }

    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn two_row_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "img/obs.csv",
            "timestamp_s, lat_rad, lon_rad\n0.0, 0.1, 0.2\n0.0083333, 0.1, 0.25\n",
        );
        let seq = load_recording(&p, "img", &RecordingFormat::default()).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.sample_rate, 120.0);
        assert_eq!(seq.source.observer, "obs");
    }

    #[test]
    fn nan_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "img/obs.csv",
            "timestamp_s,lat_rad,lon_rad\n0.0,0.1,0.2\n0.1,NaN,0.2\n",
        );
        match load_recording(&p, "img", &RecordingFormat::sitzmann()) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(dir.path(), "img/obs.csv", "timestamp_s,lat_rad\n0.0,0.1\n");
        assert!(matches!(
            load_recording(&p, "img", &RecordingFormat::sitzmann()),
            Err(DatasetError::MissingColumn { column, .. }) if column == "lon_rad"
        ));
    }

    #[test]
    fn binocular_uses_cyclopean_mean() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(
            dir.path(),
            "img/obs.csv",
            "timestamp_s,lat_left_rad,lon_left_rad,lat_right_rad,lon_right_rad\n0,0,0.1,0,-0.1\n",
        );
        let seq = load_recording(&p, "img", &RecordingFormat::salient360()).unwrap();
        let ll = seq.latlons()[0];
        assert!(ll.phi.abs() < 1e-12 && ll.lam.abs() < 1e-12);
    }

    #[test]
    fn filter_examples() {
        let seqs = vec![seq_of_len(3480, 120.0), seq_of_len(3481, 120.0)];
        assert_eq!(filter_min_samples(&seqs, 3481).len(), 1);
        let s = vec![seq_of_len(1441, 60.0)];
        assert_eq!(filter_min_samples(&s, 1441).len(), 1);
        assert_eq!(filter_min_samples(&seqs, 1), seqs);
    }

    #[test]
    fn downsample_examples() {
        // index-arithmetic oracle: kept indices are {0, k, 2k, ...} below n
        let oracle = |n: usize, k: usize| (0..n).filter(|i| i % k == 0).count();
        let d = downsample(&seq_of_len(3481, 120.0), 30.0).unwrap();
        assert_eq!(d.len(), oracle(3481, 4));
        assert_eq!(d.len(), 871);
        assert_eq!(d.sample_rate, 30.0);
        let d = downsample(&seq_of_len(1441, 60.0), 30.0).unwrap();
        assert_eq!(d.len(), oracle(1441, 2));
        assert_eq!(d.len(), 721);
        let s = seq_of_len(50, 30.0);
        assert_eq!(downsample(&s, 30.0).unwrap(), s);
        assert!(matches!(
            downsample(&seq_of_len(10, 50.0), 30.0),
            Err(DatasetError::NonIntegerDecimation { .. })
        ));
    }

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate(&seq_of_len(900, 30.0), 871).unwrap().len(), 871);
        assert_eq!(truncate(&seq_of_len(750, 30.0), 721).unwrap().len(), 721);
        let s = seq_of_len(721, 30.0);
        assert_eq!(truncate(&s, 721).unwrap(), s);
        assert!(matches!(truncate(&s, 800), Err(DatasetError::TooShort { .. })));
    }

    #[test]
    fn pipeline_yields_target_shape() {
        let cfg = PreprocessConfig::sitzmann();
        cfg.validate(120.0).unwrap();
        let seqs = vec![seq_of_len(3600, 120.0), seq_of_len(3000, 120.0), seq_of_len(3481, 120.0)];
        let out = preprocess(&seqs, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        for s in &out {
            assert_eq!(s.len(), 871);
            assert_eq!(s.sample_rate, 30.0);
            assert!((s.duration_s() - 29.0).abs() < 1e-12);
        }
        PreprocessConfig::salient360().validate(60.0).unwrap();
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:02}")).collect()
    }

    #[test]
    fn sitzmann_split() {
        let spec = SplitSpec { dataset: DatasetKind::Sitzmann, test_images: vec![], seed: 7 };
        let a = split_train_test(&names(22), &spec).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (19, 3));
        assert_eq!(a, split_train_test(&names(22), &spec).unwrap());
        let named = SplitSpec {
            test_images: vec!["img01".into(), "img05".into(), "img21".into()],
            ..spec.clone()
        };
        let b = split_train_test(&names(22), &named).unwrap();
        assert_eq!(b.test, vec!["img01", "img05", "img21"]);
        assert!(matches!(
            split_train_test(&names(21), &spec),
            Err(DatasetError::WrongImageCount { expected: 22, found: 21 })
        ));
    }

    #[test]
    fn salient_split_is_all_test() {
        let spec = SplitSpec { dataset: DatasetKind::Salient360, test_images: vec![], seed: 0 };
        let s = split_train_test(&names(85), &spec).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (0, 85));
    }

    #[test]
    fn resize_examples() {
        let big = Panorama::new(RgbImage::from_pixel(512, 256, Rgb([10, 200, 30]))).unwrap();
        let small = resize_panorama(&big, (128, 256)).unwrap();
        assert_eq!(small.native_size(), (128, 256));
        assert!(small.pixels.pixels().all(|p| *p == Rgb([10, 200, 30])));
        let same = resize_panorama(&small, (128, 256)).unwrap();
        assert_eq!(same, small);
        assert!(matches!(
            Panorama::new(RgbImage::new(100, 100)),
            Err(DatasetError::AspectMismatch { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = seq_of_len(20, 30.0);
        let p = dir.path().join("i/o.csv");
        write_sequence_csv(&p, &s).unwrap();
        let back = read_sequence_csv(&p).unwrap();
        assert_eq!(back.len(), 20);
        assert_eq!(back.sample_rate, 30.0);
        for (a, b) in s.points.iter().zip(&back.points) {
            assert!(a.angle_deg(*b) < 1e-9);
        }
    }
}
