//! Velocity-threshold saccade/fixation segmentation and scanpath extraction.
//!
//! The detector follows the median-based adaptive threshold scheme of
//! Engbert and Kliegl: the velocity spread is estimated robustly from the
//! sequence itself and saccades are the runs whose velocity exceeds
//! `lambda_vel` times that spread.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GazeSequence;
use crate::geometry::{self, GeometryError, LatLon, UnitVec3};

#[derive(Debug, Error)]
pub enum EventsError {
    #[error("sequence has {len} samples, at least {min} required")]
    SequenceTooShort { len: usize, min: usize },
    #[error("points average to (almost) zero; the spherical mean is undefined")]
    DegenerateMean,
    #[error("no sequences supplied")]
    Empty,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: u64, message: String },
}

impl From<GeometryError> for EventsError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::SequenceTooShort { len, min } => Self::SequenceTooShort { len, min },
            _ => Self::DegenerateMean,
        }
    }
}

pub const MIN_DETECTION_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fixation,
    Saccade,
}

/// A run of samples `start_idx..=end_idx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeEvent {
    pub kind: EventKind,
    pub start_idx: usize,
    pub end_idx: usize,
    pub duration: f64,
}

impl EyeEvent {
    pub fn samples(&self) -> usize {
        self.end_idx - self.start_idx + 1
    }
}

/// How the velocity spread is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadEstimator {
    /// Isotropic form on speeds: `σ² = median(|v|²) / (2 ln 2)`, the
    /// per-component median estimator under equal component spreads.
    /// Invariant to any rotation of the sphere.
    Isotropic,
    /// Classic per-component estimator `σ_k = sqrt(median(v_k²) - median(v_k)²)`
    /// on east/north tangent velocities with an elliptic threshold. Only
    /// invariant to rotations about the polar axis.
    PerComponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub lambda_vel: f64,
    /// Shorter supra-threshold runs are treated as fixation samples.
    pub min_saccade_samples: usize,
    /// Lower bound on the estimated spread in deg/s, so numerically
    /// stationary signals do not yield a zero threshold.
    pub min_spread: f64,
    pub estimator: SpreadEstimator,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            lambda_vel: 2.0,
            min_saccade_samples: 2,
            min_spread: 1e-6,
            estimator: SpreadEstimator::Isotropic,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `sqrt(median(v²) - median(v)²)`, clamped at zero.
pub fn median_spread(values: &[f64]) -> f64 {
    let mut sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    let mut raw = values.to_vec();
    let m = median(&mut raw);
    (median(&mut sq) - m * m).max(0.0).sqrt()
}

/// Isotropic spread of a speed series, see [`SpreadEstimator::Isotropic`].
pub fn isotropic_spread(speeds: &[f64]) -> f64 {
    let mut sq: Vec<f64> = speeds.iter().map(|v| v * v).collect();
    (median(&mut sq) / (2.0 * std::f64::consts::LN_2)).sqrt()
}

/// East/north angular velocity components in deg/s (central differences,
/// one-sided at the ends), expressed in the tangent frame of each sample.
pub fn tangent_velocity(points: &[UnitVec3], rate: f64) -> Result<Vec<[f64; 2]>, GeometryError> {
    let n = points.len();
    if n < 3 {
        return Err(GeometryError::SequenceTooShort { len: n, min: 3 });
    }
    let diff = |a: UnitVec3, b: UnitVec3, scale: f64| [(b.x - a.x) * scale, (b.y - a.y) * scale, (b.z - a.z) * scale];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let d = if i == 0 {
            diff(points[0], points[1], rate)
        } else if i == n - 1 {
            diff(points[n - 2], points[n - 1], rate)
        } else {
            diff(points[i - 1], points[i + 1], rate / 2.0)
        };
        let ll = points[i].to_latlon();
        let (sp, cp) = ll.phi.sin_cos();
        let (sl, cl) = ll.lam.sin_cos();
        let east = [-sl, cl, 0.0];
        let north = [-sp * cl, -sp * sl, cp];
        let dot = |u: [f64; 3]| (u[0] * d[0] + u[1] * d[1] + u[2] * d[2]).to_degrees();
        out.push([dot(east), dot(north)]);
    }
    Ok(out)
}

fn saccade_flags(seq: &GazeSequence, cfg: &DetectorConfig) -> Result<(Vec<bool>, Vec<f64>), EventsError> {
    let speed = geometry::angular_velocity(seq)?;
    let flags = match cfg.estimator {
        SpreadEstimator::Isotropic => {
            let sigma = isotropic_spread(&speed).max(cfg.min_spread);
            let threshold = cfg.lambda_vel * sigma;
            speed.iter().map(|&v| v > threshold).collect()
        }
        SpreadEstimator::PerComponent => {
            let comps = tangent_velocity(&seq.points, seq.sample_rate)?;
            let e: Vec<f64> = comps.iter().map(|c| c[0]).collect();
            let n: Vec<f64> = comps.iter().map(|c| c[1]).collect();
            let se = cfg.lambda_vel * median_spread(&e).max(cfg.min_spread);
            let sn = cfg.lambda_vel * median_spread(&n).max(cfg.min_spread);
            comps
                .iter()
                .map(|c| (c[0] / se).powi(2) + (c[1] / sn).powi(2) > 1.0)
                .collect()
        }
    };
    Ok((flags, speed))
}

fn runs(flags: &[bool]) -> Vec<(bool, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=flags.len() {
        if i == flags.len() || flags[i] != flags[start] {
            out.push((flags[start], start, i - 1));
            start = i;
        }
    }
    out
}

/// Segments a sequence into fixations and saccades that tile
/// `0..seq.len()` without gaps or overlap.
pub fn detect_events(seq: &GazeSequence, cfg: &DetectorConfig) -> Result<Vec<EyeEvent>, EventsError> {
    Ok(detect_with_velocity(seq, cfg)?.0)
}

/// [`detect_events`] plus the per-sample speed series in deg/s.
pub fn detect_with_velocity(seq: &GazeSequence, cfg: &DetectorConfig) -> Result<(Vec<EyeEvent>, Vec<f64>), EventsError> {
    if seq.len() < MIN_DETECTION_SAMPLES {
        return Err(EventsError::SequenceTooShort {
            len: seq.len(),
            min: MIN_DETECTION_SAMPLES,
        });
    }
    let (mut flags, speed) = saccade_flags(seq, cfg)?;
    for (is_sac, s, e) in runs(&flags) {
        if is_sac && e - s + 1 < cfg.min_saccade_samples {
            flags[s..=e].iter_mut().for_each(|f| *f = false);
        }
    }
    let events = runs(&flags)
        .into_iter()
        .map(|(is_sac, s, e)| EyeEvent {
            kind: if is_sac { EventKind::Saccade } else { EventKind::Fixation },
            start_idx: s,
            end_idx: e,
            duration: (e - s + 1) as f64 / seq.sample_rate,
        })
        .collect();
    Ok((events, speed))
}

/// Normalized mean of unit vectors, as latitude/longitude.
pub fn spherical_centroid(points: &[UnitVec3]) -> Result<LatLon, EventsError> {
    if points.is_empty() {
        return Err(EventsError::DegenerateMean);
    }
    let n = points.len() as f64;
    let (sx, sy, sz) = points
        .iter()
        .fold((0.0, 0.0, 0.0), |(a, b, c), p| (a + p.x, b + p.y, c + p.z));
    let (mx, my, mz) = (sx / n, sy / n, sz / n);
    if (mx * mx + my * my + mz * mz).sqrt() < 1e-6 {
        return Err(EventsError::DegenerateMean);
    }
    let v = UnitVec3::normalize(mx, my, mz).map_err(|_| EventsError::DegenerateMean)?;
    Ok(v.to_latlon())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub centroid: LatLon,
    pub duration: f64,
    pub onset: f64,
}

/// Fixations in temporal order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub fixations: Vec<Fixation>,
}

impl Scanpath {
    pub fn len(&self) -> usize {
        self.fixations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self {
            fixations: self.fixations.iter().rev().copied().collect(),
        }
    }

    pub fn centroids(&self) -> Vec<LatLon> {
        self.fixations.iter().map(|f| f.centroid).collect()
    }
}

pub const DEFAULT_MIN_FIXATION_S: f64 = 0.150;

/// Fixations from `events` lasting at least `min_fix_dur` seconds.
pub fn scanpath_from_events(seq: &GazeSequence, events: &[EyeEvent], min_fix_dur: f64) -> Result<Scanpath, EventsError> {
    let mut fixations = Vec::new();
    for ev in events.iter().filter(|e| e.kind == EventKind::Fixation) {
        if ev.duration < min_fix_dur {
            continue;
        }
        fixations.push(Fixation {
            centroid: spherical_centroid(&seq.points[ev.start_idx..=ev.end_idx])?,
            duration: ev.duration,
            onset: seq.timestamp(ev.start_idx),
        });
    }
    Ok(Scanpath { fixations })
}

pub fn extract_scanpath(seq: &GazeSequence, cfg: &DetectorConfig, min_fix_dur: f64) -> Result<Scanpath, EventsError> {
    let events = detect_events(seq, cfg)?;
    scanpath_from_events(seq, &events, min_fix_dur)
}

/// Writes `onset_s,duration_s,lat_rad,lon_rad`.
pub fn write_scanpath_csv(path: &Path, sp: &Scanpath) -> Result<(), EventsError> {
    let io = |e: std::io::Error| EventsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = String::from("onset_s,duration_s,lat_rad,lon_rad\n");
    for f in &sp.fixations {
        out.push_str(&format!("{},{},{},{}\n", f.onset, f.duration, f.centroid.phi, f.centroid.lam));
    }
    fs::write(path, out).map_err(io)
}

pub fn read_scanpath_csv(path: &Path) -> Result<Scanpath, EventsError> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| EventsError::Io {
            path: file.clone(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| EventsError::Parse { file: file.clone(), line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| EventsError::Parse {
            file: file.clone(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let idx = [col("onset_s")?, col("duration_s")?, col("lat_rad")?, col("lon_rad")?];
    let mut fixations = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EventsError::Parse { file: file.clone(), line: 0, message: e.to_string() })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut vals = [0.0; 4];
        for (v, &i) in vals.iter_mut().zip(&idx) {
            let raw = record.get(i).unwrap_or("");
            *v = raw
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| EventsError::Parse { file: file.clone(), line, message: format!("bad value `{raw}`") })?;
        }
        fixations.push(Fixation {
            onset: vals[0],
            duration: vals[1],
            centroid: LatLon::new(vals[2], vals[3]),
        });
    }
    Ok(Scanpath { fixations })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, sd: var.sqrt() }
    }
}

/// Eye-movement statistics aggregated across sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EyeStats {
    pub mean_saccade_number: MeanSd,
    /// deg/s, averaged over saccade samples within each sequence.
    pub mean_saccade_velocity: MeanSd,
    pub mean_fixation_number: MeanSd,
    /// seconds
    pub mean_fixation_duration: MeanSd,
    pub sequences: usize,
}

/// Per-sequence event counts, velocities and durations, aggregated to
/// means ± SD across sequences. Sequences without saccades (fixations) do
/// not contribute to the velocity (duration) column.
pub fn compute_stats(seqs: &[GazeSequence], cfg: &DetectorConfig) -> Result<EyeStats, EventsError> {
    if seqs.is_empty() {
        return Err(EventsError::Empty);
    }
    let mut sac_n = Vec::new();
    let mut sac_v = Vec::new();
    let mut fix_n = Vec::new();
    let mut fix_d = Vec::new();
    for seq in seqs {
        let (events, speed) = detect_with_velocity(seq, cfg)?;
        let sacs: Vec<&EyeEvent> = events.iter().filter(|e| e.kind == EventKind::Saccade).collect();
        let fixs: Vec<&EyeEvent> = events.iter().filter(|e| e.kind == EventKind::Fixation).collect();
        sac_n.push(sacs.len() as f64);
        fix_n.push(fixs.len() as f64);
        let samples: Vec<f64> = sacs.iter().flat_map(|e| speed[e.start_idx..=e.end_idx].iter().copied()).collect();
        if !samples.is_empty() {
            sac_v.push(samples.iter().sum::<f64>() / samples.len() as f64);
        }
        if !fixs.is_empty() {
            fix_d.push(fixs.iter().map(|e| e.duration).sum::<f64>() / fixs.len() as f64);
        }
    }
    Ok(EyeStats {
        mean_saccade_number: MeanSd::of(&sac_n),
        mean_saccade_velocity: MeanSd::of(&sac_v),
        mean_fixation_number: MeanSd::of(&fix_n),
        mean_fixation_duration: MeanSd::of(&fix_d),
        sequences: seqs.len(),
    })
}
