//! Sequence, scanpath and saliency similarity metrics plus the best/mean
//! evaluation protocol.
//!
//! Sequence metrics operate on pixel coordinates at an evaluation
//! resolution. By default column distances do not wrap around the
//! panorama seam; pass `wrap = true` for the shorter-way-round variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GazeSequence;
use crate::events::Scanpath;
use crate::geometry::{great_circle_deg, latlon_to_pixel, LatLon, PixelCoord};
use crate::saliency::SaliencyMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("scanpath is empty")]
    EmptyScanpath,
    #[error("need at least {min} ground-truth items, got {got}")]
    TooFewSequences { min: usize, got: usize },
    #[error("saliency maps differ in size: {0:?} vs {1:?}")]
    ResolutionMismatch((usize, usize), (usize, usize)),
    #[error("no fixations inside the frame")]
    NoFixations,
    #[error("nothing to evaluate")]
    NoItems,
}

/// Maps a sequence to pixel coordinates at `(height, width)`.
pub fn to_pixels(seq: &GazeSequence, height: usize, width: usize) -> Vec<PixelCoord> {
    seq.points
        .iter()
        .map(|p| latlon_to_pixel(p.to_latlon(), height, width))
        .collect()
}

pub fn latlons_to_pixels(points: &[LatLon], height: usize, width: usize) -> Vec<PixelCoord> {
    points.iter().map(|&p| latlon_to_pixel(p, height, width)).collect()
}

/// Cell partition of the equirectangular frame used to symbolize points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for QuantGrid {
    fn default() -> Self {
        Self { rows: 8, cols: 16 }
    }
}

impl QuantGrid {
    pub fn symbol(&self, p: PixelCoord) -> usize {
        let r = ((p.row / p.height as f64 * self.rows as f64).floor() as usize).min(self.rows - 1);
        let c = ((p.col / p.width as f64 * self.cols as f64).floor() as usize).min(self.cols - 1);
        r * self.cols + c
    }

    pub fn symbolize(&self, points: &[PixelCoord]) -> Vec<usize> {
        points.iter().map(|&p| self.symbol(p)).collect()
    }
}

/// Unit-cost insert/delete/substitute distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between the grid-cell strings of two pixel sequences.
pub fn levenshtein(a: &[PixelCoord], b: &[PixelCoord], grid: QuantGrid) -> usize {
    edit_distance(&grid.symbolize(a), &grid.symbolize(b))
}

/// Dynamic time warping with Euclidean pixel cost over the full window.
pub fn dtw(a: &[PixelCoord], b: &[PixelCoord], wrap: bool) -> Result<f64, MetricError> {
    dtw_by(a, b, |p, q| p.distance(*q, wrap))
}

/// DTW with an arbitrary point cost.
pub fn dtw_by<T>(a: &[T], b: &[T], cost: impl Fn(&T, &T) -> f64) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for x in a {
        cur[0] = f64::INFINITY;
        for (j, y) in b.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = cost(x, y) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

fn displacements(a: &[PixelCoord], b: &[PixelCoord], wrap: bool) -> Result<Vec<f64>, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    Ok(a.iter().zip(b).map(|(p, q)| p.distance(*q, wrap)).collect())
}

/// Mean per-index Euclidean displacement.
pub fn mae(a: &[PixelCoord], b: &[PixelCoord], wrap: bool) -> Result<f64, MetricError> {
    let d = displacements(a, b, wrap)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Root mean squared per-index displacement.
pub fn rmse(a: &[PixelCoord], b: &[PixelCoord], wrap: bool) -> Result<f64, MetricError> {
    let d = displacements(a, b, wrap)?;
    Ok((d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt())
}

pub const DEFAULT_REC_THRESHOLD_DEG: f64 = 2.0;

/// Cross-recurrence percentage between two scanpaths.
///
/// A pair of fixations recurs when their great-circle distance is strictly
/// below `threshold_deg`. `C` is the number of fixations that recur with at
/// least one fixation of the other scanpath, taken on whichever side has
/// fewer such fixations, so `REC = 100 * C / min(|a|, |b|)` stays in
/// `[0, 100]`.
pub fn recurrence(a: &Scanpath, b: &Scanpath, threshold_deg: f64) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyScanpath);
    }
    let mut row_hit = vec![false; a.len()];
    let mut col_hit = vec![false; b.len()];
    for (i, fa) in a.fixations.iter().enumerate() {
        for (j, fb) in b.fixations.iter().enumerate() {
            if great_circle_deg(fa.centroid, fb.centroid) < threshold_deg {
                row_hit[i] = true;
                col_hit[j] = true;
            }
        }
    }
    let count = |v: &[bool]| v.iter().filter(|&&h| h).count();
    let c = count(&row_hit).min(count(&col_hit));
    Ok(100.0 * c as f64 / a.len().min(b.len()) as f64)
}

/// Whether smaller or larger scores are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lower,
    Higher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestMean {
    pub best: f64,
    pub mean: f64,
}

fn aggregate(rows: &[Vec<f64>], dir: Direction) -> Result<BestMean, MetricError> {
    if rows.is_empty() || rows.iter().any(Vec::is_empty) {
        return Err(MetricError::NoItems);
    }
    let n = rows.len() as f64;
    let mut best = 0.0;
    let mut mean = 0.0;
    for row in rows {
        let opt = match dir {
            Direction::Lower => row.iter().copied().fold(f64::INFINITY, f64::min),
            Direction::Higher => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        best += opt;
        mean += row.iter().sum::<f64>() / row.len() as f64;
    }
    let out = BestMean { best: best / n, mean: mean / n };
    let slack = 1e-9 * (1.0 + out.mean.abs());
    match dir {
        Direction::Lower => debug_assert!(out.best <= out.mean + slack, "{out:?}"),
        Direction::Higher => debug_assert!(out.best + slack >= out.mean, "{out:?}"),
    }
    Ok(out)
}

/// Scores every generated item against every ground truth; `best` averages
/// the per-item optimum, `mean` the per-item average.
pub fn best_mean<G, T, F>(gen: &[G], gt: &[T], metric: F, dir: Direction) -> Result<BestMean, MetricError>
where
    G: Sync,
    T: Sync,
    F: Fn(&G, &T) -> Result<f64, MetricError> + Sync,
{
    if gen.is_empty() || gt.is_empty() {
        return Err(MetricError::NoItems);
    }
    let rows: Vec<Vec<f64>> = gen
        .par_iter()
        .map(|g| gt.iter().map(|t| metric(g, t)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    aggregate(&rows, dir)
}

/// Leave-one-out agreement within one image's ground truth: each item is
/// scored against all others, never against itself.
pub fn human_baseline_image<T, F>(gt: &[T], metric: F, dir: Direction) -> Result<BestMean, MetricError>
where
    T: Sync,
    F: Fn(&T, &T) -> Result<f64, MetricError> + Sync,
{
    if gt.len() < 2 {
        return Err(MetricError::TooFewSequences { min: 2, got: gt.len() });
    }
    let rows: Vec<Vec<f64>> = (0..gt.len())
        .into_par_iter()
        .map(|i| {
            (0..gt.len())
                .filter(|&j| j != i)
                .map(|j| metric(&gt[i], &gt[j]))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    aggregate(&rows, dir)
}

/// [`human_baseline_image`] per image, averaged over images.
pub fn human_baseline<T, F>(per_image: &[Vec<T>], metric: F, dir: Direction) -> Result<BestMean, MetricError>
where
    T: Sync,
    F: Fn(&T, &T) -> Result<f64, MetricError> + Sync,
{
    if per_image.is_empty() {
        return Err(MetricError::NoItems);
    }
    let scores = per_image
        .iter()
        .map(|gt| human_baseline_image(gt, &metric, dir))
        .collect::<Result<Vec<_>, _>>()?;
    let n = scores.len() as f64;
    Ok(BestMean {
        best: scores.iter().map(|s| s.best).sum::<f64>() / n,
        mean: scores.iter().map(|s| s.mean).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub auc: f64,
    pub nss: f64,
    pub cc: f64,
    pub sim: f64,
    pub kl: f64,
}

pub const KL_EPS: f64 = 1e-12;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn sum_normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Unique in-frame fixation pixels as flat indices.
pub fn fixation_pixels(fixations: &Scanpath, height: usize, width: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = fixations
        .fixations
        .iter()
        .map(|f| {
            let (r, c) = latlon_to_pixel(f.centroid, height, width).cell();
            r * width + c
        })
        .collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Judd AUC: fixated pixels are positives, every other pixel a candidate
/// negative; thresholds sweep the predicted values at the fixations.
pub fn auc_judd(pred: &[f64], fixated: &[usize]) -> Result<f64, MetricError> {
    if fixated.is_empty() {
        return Err(MetricError::NoFixations);
    }
    let n_pix = pred.len();
    let n_fix = fixated.len();
    if n_fix >= n_pix {
        return Err(MetricError::NoFixations);
    }
    let mut sorted = pred.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds: Vec<f64> = fixated.iter().map(|&i| pred[i]).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut tp = Vec::with_capacity(n_fix + 2);
    let mut fp = Vec::with_capacity(n_fix + 2);
    tp.push(0.0);
    fp.push(0.0);
    for (i, &t) in thresholds.iter().enumerate() {
        let above = sorted.partition_point(|&v| v >= t);
        tp.push((i + 1) as f64 / n_fix as f64);
        fp.push((above - (i + 1)) as f64 / (n_pix - n_fix) as f64);
    }
    tp.push(1.0);
    fp.push(1.0);
    Ok(tp.windows(2).zip(fp.windows(2)).map(|(t, f)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0).sum())
}

/// Mean standardized prediction at the fixated pixels; 0 for a constant map.
pub fn nss(pred: &[f64], fixated: &[usize]) -> Result<f64, MetricError> {
    if fixated.is_empty() {
        return Err(MetricError::NoFixations);
    }
    let (mean, std) = mean_std(pred);
    if std == 0.0 {
        return Ok(0.0);
    }
    Ok(fixated.iter().map(|&i| (pred[i] - mean) / std).sum::<f64>() / fixated.len() as f64)
}

/// Pearson correlation; 0 when either map is constant.
pub fn cc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Histogram intersection of the sum-normalized maps.
pub fn sim(pred: &[f64], gt: &[f64]) -> f64 {
    let p = sum_normalized(pred);
    let g = sum_normalized(gt);
    p.iter().zip(&g).map(|(a, b)| a.min(*b)).sum()
}

/// `Σ g log((g + ε) / (p + ε))` on sum-normalized maps.
pub fn kl_divergence(pred: &[f64], gt: &[f64]) -> f64 {
    let p = sum_normalized(pred);
    let g = sum_normalized(gt);
    p.iter()
        .zip(&g)
        .filter(|(_, &gi)| gi > 0.0)
        .map(|(pi, gi)| gi * ((gi + KL_EPS) / (pi + KL_EPS)).ln())
        .sum()
}

pub fn saliency_metrics(pred: &SaliencyMap, gt_map: &SaliencyMap, gt_fixations: &Scanpath) -> Result<SaliencyScores, MetricError> {
    if pred.size() != gt_map.size() {
        return Err(MetricError::ResolutionMismatch(pred.size(), gt_map.size()));
    }
    let (h, w) = pred.size();
    let fixated = fixation_pixels(gt_fixations, h, w);
    Ok(SaliencyScores {
        auc: auc_judd(&pred.values, &fixated)?,
        nss: nss(&pred.values, &fixated)?,
        cc: cc(&pred.values, &gt_map.values),
        sim: sim(&pred.values, &gt_map.values),
        kl: kl_divergence(&pred.values, &gt_map.values),
    })
}
