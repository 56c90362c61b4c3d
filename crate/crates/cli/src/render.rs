use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gazediff_core::dataset::{read_sequence_csv, Panorama};
use gazediff_core::events::read_scanpath_csv;
use gazediff_core::geometry::{latlon_to_pixel, LatLon};
use gazediff_core::saliency::{normalize, Normalization, SaliencyMap, SaliencyMeta};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_circle_mut, draw_line_segment_mut};

use crate::config::RunConfig;
use crate::files::{require, stem};
use crate::font::{draw_label, text_size};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RenderKind {
    Sequence,
    Scanpath,
    Saliency,
}

const PALETTE: [[u8; 3]; 6] = [
    [255, 64, 64],
    [64, 160, 255],
    [80, 220, 80],
    [255, 200, 40],
    [220, 80, 255],
    [40, 230, 230],
];

fn to_xy(p: LatLon, img: &RgbImage) -> (f32, f32) {
    let px = latlon_to_pixel(p, img.height() as usize, img.width() as usize);
    (px.col as f32, px.row as f32)
}

/// Polyline through `points`, broken where consecutive points cross the
/// seam.
fn draw_path(img: &mut RgbImage, points: &[LatLon], color: Rgb<u8>) {
    let half = img.width() as f32 / 2.0;
    for pair in points.windows(2) {
        let (a, b) = (to_xy(pair[0], img), to_xy(pair[1], img));
        if (a.0 - b.0).abs() < half {
            draw_line_segment_mut(img, a, b, color);
        }
    }
}

fn render_sequences(img: &mut RgbImage, inputs: &[PathBuf]) -> Result<()> {
    for (i, path) in inputs.iter().enumerate() {
        let seq = read_sequence_csv(path)?;
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let pts = seq.latlons();
        draw_path(img, &pts, color);
        if let Some(&first) = pts.first() {
            let (x, y) = to_xy(first, img);
            draw_hollow_circle_mut(img, (x as i32, y as i32), 4, color);
        }
    }
    Ok(())
}

fn render_scanpaths(img: &mut RgbImage, inputs: &[PathBuf]) -> Result<()> {
    let scale = (img.height() / 256).max(1);
    for (i, path) in inputs.iter().enumerate() {
        let sp = read_scanpath_csv(path)?;
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let centroids = sp.centroids();
        draw_path(img, &centroids, color);
        for (k, f) in sp.fixations.iter().enumerate() {
            let (x, y) = to_xy(f.centroid, img);
            let radius = ((3.0 + 6.0 * f.duration.min(1.0)) * scale as f64) as i32;
            draw_filled_circle_mut(img, (x as i32, y as i32), radius, color);
            let label = (k + 1).to_string();
            let (tw, th) = text_size(&label, scale);
            draw_label(
                img,
                &label,
                x as i64 - tw as i64 / 2,
                y as i64 - th as i64 / 2,
                scale,
                Rgb([255, 255, 255]),
                Rgb([0, 0, 0]),
            );
        }
    }
    Ok(())
}

/// Perceptual-ish blue-cyan-yellow-red ramp over `[0, 1]`.
pub fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.6, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let x = v * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let t = x - i as f64;
    [0, 1, 2].map(|c| stops[i][c] * (1.0 - t) + stops[i + 1][c] * t)
}

pub fn load_saliency(meta_path: &Path) -> Result<SaliencyMap> {
    let meta: SaliencyMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)
        .with_context(|| format!("{} is not saliency metadata", meta_path.display()))?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    Ok(SaliencyMap::load_sidecar(&dir.join(&meta.sidecar), meta.height, meta.width)?)
}

/// `(1 - alpha) * image + alpha * heat(map)` with the map scaled to max one.
pub fn blend_saliency(img: &mut RgbImage, map: &SaliencyMap, alpha: f64) -> Result<()> {
    let (h, w) = map.size();
    if (h as u32, w as u32) != (img.height(), img.width()) {
        bail!("saliency map is {h}x{w} but the panorama is {}x{}", img.height(), img.width());
    }
    if !(0.0..=1.0).contains(&alpha) {
        bail!("alpha must lie in [0, 1], got {alpha}");
    }
    let m = normalize(map, Normalization::MaxOne)?;
    for (x, y, p) in img.enumerate_pixels_mut() {
        let c = heat(m.get(y as usize, x as usize));
        for k in 0..3 {
            p.0[k] = ((1.0 - alpha) * p.0[k] as f64 + alpha * 255.0 * c[k]).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, kind: RenderKind, inputs: &[PathBuf], image: &Path, alpha: f64, out: Option<&Path>) -> Result<()> {
    require(image)?;
    if inputs.is_empty() {
        bail!("nothing to render: pass at least one --input");
    }
    for p in inputs {
        require(p)?;
    }
    let mut img = Panorama::load(image)?.pixels;
    match kind {
        RenderKind::Sequence => render_sequences(&mut img, inputs)?,
        RenderKind::Scanpath => render_scanpaths(&mut img, inputs)?,
        RenderKind::Saliency => {
            if inputs.len() != 1 {
                bail!("saliency rendering takes exactly one map");
            }
            blend_saliency(&mut img, &load_saliency(&inputs[0])?, alpha)?;
        }
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("renders"));
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => dir.join(format!("{}_{}.png", stem(image), format!("{kind:?}").to_lowercase())),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
