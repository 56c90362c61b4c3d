//! Spherical convolutional encoder producing the panorama condition vector.

use std::f64::consts::{PI, TAU};

use candle_core::{DType, Device, Tensor};
use gazediff_core::dataset::Panorama;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ModelError, Result};
use crate::nn::{Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 256,
            channels: vec![16, 32, 64, 64],
            kernel: 3,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.channels.len();
        if self.channels.is_empty() || self.channels.contains(&0) || self.embed_dim == 0 {
            return Err(ModelError::InvalidConfig("encoder widths must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::InvalidConfig(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.height % down != 0 || self.width % down != 0 || self.height / (down / 2) < self.kernel {
            return Err(ModelError::InvalidConfig(format!(
                "{}x{} input cannot be halved {} times",
                self.height,
                self.width,
                self.channels.len()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut cin = 5;
        let mut n = 0;
        for &c in &self.channels {
            n += c * cin * self.kernel * self.kernel + c;
            cin = c;
        }
        n + Linear::param_count(cin, self.embed_dim, true)
    }
}

/// Panorama condition vector `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub values: Vec<f64>,
}

/// Fractional source `(row, col)` of every kernel tap at every output pixel.
/// Columns are unwrapped; the bilinear lookup wraps them.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSamplingGrid {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    taps: Vec<(f64, f64)>,
}

impl SphereSamplingGrid {
    pub fn tap(&self, row: usize, col: usize, tap: usize) -> (f64, f64) {
        let kk = self.kernel * self.kernel;
        self.taps[(row * self.width + col) * kk + tap]
    }

    /// Bilinear corners wrapped horizontally and clamped vertically, laid out
    /// as `(corner, tap, pixel)`.
    fn bilinear(&self) -> (Vec<u32>, Vec<f64>) {
        let (h, w) = (self.height, self.width);
        let kk = self.kernel * self.kernel;
        let hw = h * w;
        let mut idx = vec![0u32; 4 * kk * hw];
        let mut wts = vec![0.0; 4 * kk * hw];
        for p in 0..hw {
            for k in 0..kk {
                let (rf, cf) = self.taps[p * kk + k];
                let (r0, c0) = (rf.floor(), cf.floor());
                let (fr, fc) = (rf - r0, cf - c0);
                let clamp_row = |r: f64| r.clamp(0.0, (h - 1) as f64) as usize;
                let wrap_col = |c: f64| c.rem_euclid(w as f64) as usize % w;
                let corners = [
                    (clamp_row(r0), wrap_col(c0), (1.0 - fr) * (1.0 - fc)),
                    (clamp_row(r0), wrap_col(c0 + 1.0), (1.0 - fr) * fc),
                    (clamp_row(r0 + 1.0), wrap_col(c0), fr * (1.0 - fc)),
                    (clamp_row(r0 + 1.0), wrap_col(c0 + 1.0), fr * fc),
                ];
                for (q, &(r, c, wt)) in corners.iter().enumerate() {
                    let slot = (q * kk + k) * hw + p;
                    idx[slot] = (r * w + c) as u32;
                    wts[slot] = wt;
                }
            }
        }
        (idx, wts)
    }
}

/// Places a regular `kernel x kernel` grid on the tangent plane at each pixel
/// centre and projects it back onto the equirectangular raster.
pub fn build_sphere_grid(height: usize, width: usize, kernel: usize) -> Result<SphereSamplingGrid> {
    if height < kernel || width < kernel || kernel % 2 == 0 {
        return Err(ModelError::InvalidConfig(format!("{height}x{width} grid with kernel {kernel}")));
    }
    let half = (kernel / 2) as isize;
    let (dlat, dlon) = (PI / height as f64, TAU / width as f64);
    let kk = kernel * kernel;
    // per row: (row_frac, col offset) for each tap, shared by all columns
    let mut row_taps = Vec::with_capacity(height * kk);
    for r in 0..height {
        let phi0 = PI / 2.0 - (r as f64 + 0.5) * dlat;
        for i in -half..=half {
            for j in -half..=half {
                let x = dlon.tan() * j as f64;
                let y = dlat.tan() * (-i) as f64;
                let rho = x.hypot(y);
                let (phi, dl) = if rho == 0.0 {
                    (phi0, 0.0)
                } else {
                    let nu = rho.atan();
                    let phi = (nu.cos() * phi0.sin() + y * nu.sin() * phi0.cos() / rho).clamp(-1.0, 1.0).asin();
                    let dl = (x * nu.sin()).atan2(rho * phi0.cos() * nu.cos() - y * phi0.sin() * nu.sin());
                    (phi, dl)
                };
                let rf = (PI / 2.0 - phi) / PI * height as f64 - 0.5;
                row_taps.push((rf, dl / TAU * width as f64));
            }
        }
    }
    let mut taps = Vec::with_capacity(height * width * kk);
    for r in 0..height {
        for c in 0..width {
            taps.extend(row_taps[r * kk..(r + 1) * kk].iter().map(|&(rf, dc)| (rf, c as f64 + dc)));
        }
    }
    Ok(SphereSamplingGrid { height, width, kernel, taps })
}

/// RGB scaled to `[0, 1]` plus row and column channels in `[-1, 1]`, as a
/// `(5, H, W)` tensor.
pub fn coordconv_augment(img: &Panorama, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = img.native_size();
    let mut data = vec![0f32; 5 * h * w];
    let norm = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f32 / (n - 1) as f32 } else { 0.0 };
    for (x, y, px) in img.pixels.enumerate_pixels() {
        let (r, c) = (y as usize, x as usize);
        let p = r * w + c;
        for ch in 0..3 {
            data[ch * h * w + p] = px.0[ch] as f32 / 255.0;
        }
        data[3 * h * w + p] = norm(r, h);
        data[4 * h * w + p] = norm(c, w);
    }
    Ok(Tensor::from_vec(data, (5, h, w), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct SphereConv {
    weight: Tensor,
    bias: Tensor,
    indices: [Tensor; 4],
    weights: [Tensor; 4],
    taps: usize,
    hw: usize,
}

impl SphereConv {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, grid: &SphereSamplingGrid) -> Result<Self> {
        let taps = grid.kernel * grid.kernel;
        let hw = grid.height * grid.width;
        let fan_in = cin * taps;
        let weight = ps.param(&format!("{name}.weight"), &[cout, fan_in], Init::FanIn(fan_in))?;
        let bias = ps.param(&format!("{name}.bias"), &[cout, 1], Init::FanIn(fan_in))?;
        let (idx, wts) = grid.bilinear();
        let n = taps * hw;
        let dev = ps.device().clone();
        let corner_idx = |q: usize| Tensor::from_slice(&idx[q * n..(q + 1) * n], n, &dev);
        let corner_wt = |q: usize| -> candle_core::Result<Tensor> {
            Tensor::from_slice(&wts[q * n..(q + 1) * n], (taps, hw), &dev)?.to_dtype(ps.dtype())
        };
        Ok(Self {
            weight,
            bias,
            indices: [corner_idx(0)?, corner_idx(1)?, corner_idx(2)?, corner_idx(3)?],
            weights: [corner_wt(0)?, corner_wt(1)?, corner_wt(2)?, corner_wt(3)?],
            taps,
            hw,
        })
    }

    /// `(B, Cin, H*W)` to `(B, Cout, H*W)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, _) = x.dims3()?;
        let mut sampled: Option<Tensor> = None;
        for q in 0..4 {
            let g = x
                .index_select(&self.indices[q], 2)?
                .reshape((b, cin, self.taps, self.hw))?
                .broadcast_mul(&self.weights[q])?;
            sampled = Some(match sampled {
                None => g,
                Some(s) => (s + g)?,
            });
        }
        let cols = sampled.expect("four corners").reshape((b, cin * self.taps, self.hw))?;
        let y = self.weight.broadcast_left(b)?.matmul(&cols)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct SphereEncoder {
    config: EncoderConfig,
    convs: Vec<SphereConv>,
    pub proj: Linear,
}

impl SphereEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.channels.len());
        let (mut h, mut w, mut cin) = (config.height, config.width, 5);
        for (i, &cout) in config.channels.iter().enumerate() {
            let grid = build_sphere_grid(h, w, config.kernel)?;
            convs.push(SphereConv::new(ps, &format!("{name}.conv{i}"), cin, cout, &grid)?);
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let proj = Linear::new(ps, &format!("{name}.proj"), cin, config.embed_dim)?;
        Ok(Self { config: config.clone(), convs, proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Output of every conv block followed by the `(B, m)` embedding.
    pub fn forward_layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (b, c, h, w) = x.dims4()?;
        if c != 5 || h != self.config.height || w != self.config.width {
            return Err(shape_err(
                format!("(B, 5, {}, {})", self.config.height, self.config.width),
                x.dims(),
            ));
        }
        let (mut h, mut w) = (h, w);
        let mut cur = x.reshape((b, 5, h * w))?;
        let mut outs = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            let y = conv.forward(&cur)?.silu()?;
            let cout = y.dim(1)?;
            let pooled = y.reshape((b, cout, h, w))?.avg_pool2d((2, 2))?;
            h /= 2;
            w /= 2;
            cur = pooled.reshape((b, cout, h * w))?;
            outs.push(pooled);
        }
        let gap = cur.mean(2)?;
        outs.push(self.proj.forward(&gap)?);
        Ok(outs)
    }

    /// `(B, 5, H, W)` to `(B, m)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_layers(x)?.pop().expect("embedding"))
    }

    pub fn encode_panorama(&self, img: &Panorama) -> Result<ConditionEmbedding> {
        let (h, w) = img.native_size();
        if (h, w) != (self.config.height, self.config.width) {
            return Err(shape_err(format!("{}x{} panorama", self.config.height, self.config.width), (h, w)));
        }
        let x = coordconv_augment(img, self.proj.weight.dtype(), self.proj.weight.device())?.unsqueeze(0)?;
        let c = self.forward(&x)?.squeeze(0)?.to_dtype(DType::F64)?;
        Ok(ConditionEmbedding { values: c.to_vec1()? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    #[test]
    fn equator_taps_match_planar_grid() {
        // odd height puts row 64 exactly on the equator
        let g = build_sphere_grid(129, 258, 3).unwrap();
        let row = 64;
        for tap in 0..9 {
            let (di, dj) = ((tap / 3) as f64 - 1.0, (tap % 3) as f64 - 1.0);
            let (rf, cf) = g.tap(row, 10, tap);
            assert!((rf - (row as f64 + di)).abs() < 1e-3, "{tap} {rf}");
            assert!((cf - (10.0 + dj)).abs() < 1e-3, "{tap} {cf}");
        }
    }

    #[test]
    fn poleward_taps_spread_horizontally() {
        let g = build_sphere_grid(128, 256, 3).unwrap();
        for row in [10usize, 21, 40] {
            let phi = PI / 2.0 - (row as f64 + 0.5) * PI / 128.0;
            let spread = g.tap(row, 0, 5).1 - g.tap(row, 0, 3).1;
            assert!(spread / 2.0 >= 1.0 / phi.cos() * 0.98, "row {row}: {spread}");
        }
    }

    #[test]
    fn column_shift_is_translation() {
        let g = build_sphere_grid(16, 32, 3).unwrap();
        for r in 0..16 {
            for t in 0..9 {
                let (a, b) = (g.tap(r, 4, t), g.tap(r, 5, t));
                assert_eq!(a.0, b.0);
                assert!((b.1 - a.1 - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taps_wrap_across_seam() {
        let g = build_sphere_grid(16, 32, 3).unwrap();
        let (idx, _) = g.bilinear();
        let hw = 16 * 32;
        // right neighbour of the last column, corner 0
        let p = 7 * 32 + 31;
        assert_eq!(idx[5 * hw + p] as usize, 7 * 32);
    }

    #[test]
    fn coordconv_channels() {
        let img = Panorama::new(RgbImage::from_pixel(8, 4, image::Rgb([255, 0, 51]))).unwrap();
        let t = coordconv_augment(&img, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[5, 4, 8]);
        let v: Vec<Vec<Vec<f64>>> = t.to_vec3().unwrap();
        assert_eq!((v[3][0][0], v[4][0][0]), (-1.0, -1.0));
        assert_eq!((v[3][3][7], v[4][3][7]), (1.0, 1.0));
        assert!((v[0][1][1] - 1.0).abs() < 1e-7 && (v[2][1][1] - 0.2).abs() < 1e-7);
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig { height: 16, width: 32, channels: vec![4, 6], kernel: 3, embed_dim: 5 }
    }

    #[test]
    fn encoder_shapes_and_param_count() {
        let mut ps = ParamStore::new(1, DType::F32, &Device::Cpu);
        let cfg = EncoderConfig::default();
        let enc = SphereEncoder::new(&mut ps, "enc", &cfg).unwrap();
        assert_eq!(ps.element_count(), cfg.param_count());
        let img = Panorama::new(RgbImage::from_fn(256, 128, |x, y| image::Rgb([x as u8, y as u8, 7]))).unwrap();
        let c = enc.encode_panorama(&img).unwrap();
        assert_eq!(c.values.len(), 64);
        assert!(c.values.iter().all(|v| v.is_finite()));
        assert_eq!(enc.encode_panorama(&img).unwrap(), c);
        let wrong = Panorama::new(RgbImage::new(64, 32)).unwrap();
        assert!(matches!(enc.encode_panorama(&wrong), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_projection_gives_zero_embedding() {
        let mut ps = ParamStore::new(1, DType::F64, &Device::Cpu);
        let enc = SphereEncoder::new(&mut ps, "enc", &small_config()).unwrap();
        for (name, var) in ps.vars() {
            if name.starts_with("enc.proj") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let img = Panorama::new(RgbImage::new(32, 16)).unwrap();
        assert!(enc.encode_panorama(&img).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_layer_outputs_are_finite() {
        let mut ps = ParamStore::new(3, DType::F32, &Device::Cpu);
        let enc = SphereEncoder::new(&mut ps, "enc", &small_config()).unwrap();
        let img = Panorama::new(RgbImage::from_pixel(32, 16, image::Rgb([255, 255, 255]))).unwrap();
        let x = coordconv_augment(&img, DType::F32, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let layers = enc.forward_layers(&x).unwrap();
        assert_eq!(layers.len(), 3);
        for t in layers {
            let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}
