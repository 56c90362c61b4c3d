//! Fixation maps and spherical-Gaussian saliency maps on the
//! equirectangular grid.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Scanpath;
use crate::geometry::latlon_to_pixel;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("map has zero total mass")]
    ZeroMap,
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("map of {got} values does not match {height}x{width}")]
    ShapeMismatch { height: usize, width: usize, got: usize },
    #[error("negative or non-finite saliency value at index {0}")]
    InvalidValue(usize),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_error(path: &Path, e: impl ToString) -> SaliencyError {
    SaliencyError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Per-pixel fixation counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationMap {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl FixationMap {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "fixation map must be non-empty");
        Self {
            height,
            width,
            counts: vec![0; height * width],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.width + col]
    }
}

/// Bins every fixation centroid into its pixel.
pub fn accumulate_fixations(paths: &[Scanpath], size: (usize, usize)) -> FixationMap {
    let (h, w) = size;
    let mut map = FixationMap::new(h, w);
    for f in paths.iter().flat_map(|p| p.fixations.iter()) {
        let (r, c) = latlon_to_pixel(f.centroid, h, w).cell();
        map.counts[r * w + c] += 1;
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    SumOne,
    MaxOne,
}

/// Non-negative attention density over an `height x width` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl SaliencyMap {
    /// Validates and rescales `values` to the requested normalization.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>, mode: Normalization) -> Result<Self, SaliencyError> {
        if values.len() != height * width {
            return Err(SaliencyError::ShapeMismatch { height, width, got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(SaliencyError::InvalidValue(i));
        }
        normalize_values(values, mode).map(|values| Self { height, width, values, normalization: mode })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        (i / self.width, i % self.width)
    }

    /// Writes the max-one map as a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<(), SaliencyError> {
        let m = normalize(self, Normalization::MaxOne)?;
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(m.get(y as usize, x as usize) * 65535.0).round() as u16])
        });
        img.save(path).map_err(|e| io_error(path, e))
    }

    /// Writes the sum-one map as raw little-endian `f64`, row-major.
    pub fn save_sidecar(&self, path: &Path) -> Result<(), SaliencyError> {
        let m = normalize(self, Normalization::SumOne)?;
        let bytes: Vec<u8> = m.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| io_error(path, e))
    }

    pub fn load_sidecar(path: &Path, height: usize, width: usize) -> Result<Self, SaliencyError> {
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        if bytes.len() != height * width * 8 {
            return Err(SaliencyError::ShapeMismatch { height, width, got: bytes.len() / 8 });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect::<Vec<f64>>();
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(SaliencyError::InvalidValue(i));
        }
        if !(values.iter().sum::<f64>() > 0.0) {
            return Err(SaliencyError::ZeroMap);
        }
        Ok(Self { height, width, values, normalization: Normalization::SumOne })
    }
}

/// Metadata written next to an exported map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMeta {
    pub sigma_deg: f64,
    pub height: usize,
    pub width: usize,
    pub fixation_count: u64,
    pub png: String,
    pub sidecar: String,
    pub sidecar_dtype: String,
}

/// Writes `<stem>.png`, `<stem>.f64` and `<stem>.json` into `dir`.
pub fn export_map(dir: &Path, stem: &str, map: &SaliencyMap, sigma_deg: f64, fixation_count: u64) -> Result<SaliencyMeta, SaliencyError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let meta = SaliencyMeta {
        sigma_deg,
        height: map.height,
        width: map.width,
        fixation_count,
        png: format!("{stem}.png"),
        sidecar: format!("{stem}.f64"),
        sidecar_dtype: "f64le".into(),
    };
    map.save_png16(&dir.join(&meta.png))?;
    map.save_sidecar(&dir.join(&meta.sidecar))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&meta).map_err(|e| io_error(&json_path, e))?;
    fs::write(&json_path, text + "\n").map_err(|e| io_error(&json_path, e))?;
    Ok(meta)
}

fn normalize_values(values: Vec<f64>, mode: Normalization) -> Result<Vec<f64>, SaliencyError> {
    let scale = match mode {
        Normalization::SumOne => values.iter().sum::<f64>(),
        Normalization::MaxOne => values.iter().copied().fold(0.0, f64::max),
    };
    if !(scale > 0.0) {
        return Err(SaliencyError::ZeroMap);
    }
    Ok(values.into_iter().map(|v| v / scale).collect())
}

pub fn normalize(map: &SaliencyMap, mode: Normalization) -> Result<SaliencyMap, SaliencyError> {
    if map.normalization == mode {
        return Ok(map.clone());
    }
    Ok(SaliencyMap {
        height: map.height,
        width: map.width,
        values: normalize_values(map.values.clone(), mode)?,
        normalization: mode,
    })
}

pub const DEFAULT_SIGMA_DEG: f64 = 1.0;
/// Kernel support in multiples of sigma.
pub const KERNEL_TRUNCATION: f64 = 4.0;

fn row_latitude(row: usize, height: usize) -> f64 {
    PI / 2.0 - (row as f64 + 0.5) / height as f64 * PI
}

/// Unnormalized sum of spherical Gaussians `count * exp(-d² / 2σ²)`, with
/// `d` the great-circle distance in degrees between pixel centres,
/// truncated at `KERNEL_TRUNCATION * σ`.
pub fn gaussian_density(fmap: &FixationMap, sigma_deg: f64) -> Result<Vec<f64>, SaliencyError> {
    if !(sigma_deg > 0.0 && sigma_deg.is_finite()) {
        return Err(SaliencyError::InvalidSigma(sigma_deg));
    }
    let (h, w) = (fmap.height, fmap.width);
    let radius_deg = KERNEL_TRUNCATION * sigma_deg;
    let radius = radius_deg.to_radians();
    let lat: Vec<f64> = (0..h).map(|r| row_latitude(r, h)).collect();
    let cos_lat: Vec<f64> = lat.iter().map(|p| p.cos()).collect();
    let dlam = TAU / w as f64;
    // sin²(k Δλ / 2) for every column offset
    let hav_col: Vec<f64> = (0..w).map(|k| (k as f64 * dlam / 2.0).sin().powi(2)).collect();

    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); h];
    for (i, &c) in fmap.counts.iter().enumerate() {
        if c > 0 {
            by_row[i / w].push((i % w, c as f64));
        }
    }
    let row_span = (radius / (PI / h as f64)).ceil() as usize + 1;
    let two_sigma_sq = 2.0 * sigma_deg * sigma_deg;

    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row_out)| {
        let lo = r.saturating_sub(row_span);
        let hi = (r + row_span).min(h - 1);
        for r0 in lo..=hi {
            if by_row[r0].is_empty() || (lat[r] - lat[r0]).abs() > radius {
                continue;
            }
            let hav_lat = ((lat[r] - lat[r0]) / 2.0).sin().powi(2);
            let cc = cos_lat[r] * cos_lat[r0];
            // widest longitude offset that can stay within the radius
            let max_k = if cc <= 0.0 {
                w
            } else {
                let s = ((radius / 2.0).sin().powi(2) - hav_lat) / cc;
                if s >= 1.0 {
                    w
                } else {
                    ((2.0 * s.max(0.0).sqrt().asin()) / dlam).ceil() as usize + 1
                }
            };
            for &(c0, count) in &by_row[r0] {
                let mut add = |k: usize, c: usize| {
                    let hav = hav_lat + cc * hav_col[k];
                    let d = (2.0 * hav.sqrt().min(1.0).asin()).to_degrees();
                    if d <= radius_deg {
                        row_out[c] += count * (-d * d / two_sigma_sq).exp();
                    }
                };
                if 2 * max_k + 1 >= w {
                    for c in 0..w {
                        let k = (c + w - c0) % w;
                        add(k.min(w - k), c);
                    }
                } else {
                    add(0, c0);
                    for k in 1..=max_k {
                        add(k, (c0 + k) % w);
                        add(k, (c0 + w - k) % w);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Sum-normalized spherical-Gaussian saliency map.
pub fn blur_to_saliency(fmap: &FixationMap, sigma_deg: f64) -> Result<SaliencyMap, SaliencyError> {
    let values = gaussian_density(fmap, sigma_deg)?;
    SaliencyMap::from_values(fmap.height, fmap.width, values, Normalization::SumOne)
}
