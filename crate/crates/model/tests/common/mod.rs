#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use gazediff_core::dataset::{GazeSequence, Panorama};
use gazediff_core::geometry::LatLon;
use gazediff_model::denoiser::DenoiserConfig;
use gazediff_model::diffusion::DiffusionConfig;
use gazediff_model::encoder::EncoderConfig;
use gazediff_model::ModelConfig;
use image::{Rgb, RgbImage};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            height: 16,
            width: 32,
            channels: vec![4, 6],
            kernel: 3,
            embed_dim: 4,
        },
        denoiser: DenoiserConfig {
            residual_layers: 2,
            channels: 8,
            attention_heads: 2,
            ff_dim: 8,
            dilations: vec![1, 2],
            cond_dim: 4,
            ..DenoiserConfig::default()
        },
        diffusion: DiffusionConfig {
            batch_size: 2,
            micro_batch: 2,
            epochs: 3,
            lr_decay_epochs: vec![2],
            ..DiffusionConfig::default()
        },
        seed: 17,
    }
}

pub fn panorama(h: u32, seed: u8) -> Panorama {
    Panorama::new(RgbImage::from_fn(2 * h, h, |x, y| {
        Rgb([(x as u8).wrapping_mul(seed), (y as u8).wrapping_add(seed), seed])
    }))
    .unwrap()
}

/// Slow drift along a great circle parameterized by `phase`.
pub fn sweep(len: usize, phase: f64, image: &str) -> GazeSequence {
    let pts: Vec<LatLon> = (0..len)
        .map(|i| {
            let s = i as f64 / len as f64;
            LatLon::new(0.4 * (3.0 * s + phase).sin(), -2.0 + 4.0 * s + phase)
        })
        .collect();
    GazeSequence::from_latlons(&pts, 30.0, format!("obs{phase}"), image).unwrap()
}

pub fn set_element(var: &Var, index: usize, value: f64) {
    let dims = var.dims().to_vec();
    let mut v: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
    v[index] = value;
    let t = Tensor::from_vec(v, dims, &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap();
    var.set(&t).unwrap();
}

pub fn element(t: &Tensor, index: usize) -> f64 {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[index]
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}
