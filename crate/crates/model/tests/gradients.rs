mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::{element, relative_error, set_element, tiny_config};
use gazediff_model::denoiser::DenoiserConfig;
use gazediff_model::encoder::{coordconv_augment, SphereEncoder};
use gazediff_model::nn::{randn, ParamStore};
use gazediff_model::GazeDiffusion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Central-difference check of `f` against autodiff on `probes` randomly
/// chosen parameter entries.
fn check_params(ps: &ParamStore, probes: usize, seed: u64, f: &dyn Fn() -> Tensor) {
    let loss = f();
    let grads = loss.backward().unwrap();
    let vars: Vec<(String, Var)> = ps.vars().map(|(n, v)| (n.clone(), v.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < probes {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let i = rng.random_range(0..var.elem_count());
        let analytic = grads.get(var.as_tensor()).map(|g| element(g, i)).unwrap_or(0.0);
        let orig = element(var.as_tensor(), i);
        set_element(var, i, orig + H);
        let up: f64 = f().to_scalar().unwrap();
        set_element(var, i, orig - H);
        let down: f64 = f().to_scalar().unwrap();
        set_element(var, i, orig);
        let numeric = (up - down) / (2.0 * H);
        let err = relative_error(analytic, numeric);
        assert!(err < 1e-3, "{name}[{i}]: autodiff {analytic} vs fd {numeric} (rel {err})");
        checked += 1;
    }
}

#[test]
fn denoiser_loss_gradient_matches_finite_differences() {
    let mut cfg = tiny_config();
    cfg.denoiser = DenoiserConfig { zero_init_output: false, ..cfg.denoiser };
    let model = GazeDiffusion::new(&cfg, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = randn(&mut rng, &[2, 3, 10], DType::F64, &Device::Cpu).unwrap();
    let eps = randn(&mut rng, &[2, 3, 10], DType::F64, &Device::Cpu).unwrap();
    let imgs = Tensor::stack(
        &[
            model.image_tensor(&common::panorama(16, 3)).unwrap(),
            model.image_tensor(&common::panorama(16, 9)).unwrap(),
        ],
        0,
    )
    .unwrap();
    let f = || model.loss(&x0, &imgs, &[1, 0], &[30, 170], &eps).unwrap();
    check_params(model.params(), 10, 1, &f);
}

#[test]
fn every_parameter_receives_gradient_through_full_model() {
    let mut cfg = tiny_config();
    cfg.denoiser = DenoiserConfig { zero_init_output: false, ..cfg.denoiser };
    let model = GazeDiffusion::new(&cfg, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = randn(&mut rng, &[1, 3, 6], DType::F64, &Device::Cpu).unwrap();
    let eps = randn(&mut rng, &[1, 3, 6], DType::F64, &Device::Cpu).unwrap();
    let imgs = model.image_tensor(&common::panorama(16, 5)).unwrap().unsqueeze(0).unwrap();
    let grads = model.loss(&x0, &imgs, &[0], &[60], &eps).unwrap().backward().unwrap();
    for (name, var) in model.params().vars() {
        assert!(grads.get(var.as_tensor()).is_some(), "{name} has no gradient");
    }
}

#[test]
fn encoder_pixel_gradient_matches_finite_differences() {
    let cfg = tiny_config().encoder;
    let mut ps = ParamStore::new(2, DType::F64, &Device::Cpu);
    let enc = SphereEncoder::new(&mut ps, "enc", &cfg).unwrap();
    let img = common::panorama(16, 7);
    let x = Var::from_tensor(&coordconv_augment(&img, DType::F64, &Device::Cpu).unwrap().unsqueeze(0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = randn(&mut rng, &[1, cfg.embed_dim], DType::F64, &Device::Cpu).unwrap();
    let f = || (enc.forward(x.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
    let grads = f().backward().unwrap();
    let g = grads.get(x.as_tensor()).expect("input gradient");
    for _ in 0..10 {
        // RGB channels only; coordinate channels are constants in practice
        let i = rng.random_range(0..3 * 16 * 32);
        let orig = element(x.as_tensor(), i);
        set_element(&x, i, orig + H);
        let up: f64 = f().to_scalar().unwrap();
        set_element(&x, i, orig - H);
        let down: f64 = f().to_scalar().unwrap();
        set_element(&x, i, orig);
        let numeric = (up - down) / (2.0 * H);
        let analytic = element(g, i);
        assert!(relative_error(analytic, numeric) < 1e-3, "pixel {i}: {analytic} vs {numeric}");
    }
}

#[test]
fn sphere_conv_mixes_across_the_seam() {
    let cfg = tiny_config().encoder;
    let mut ps = ParamStore::new(2, DType::F64, &Device::Cpu);
    let enc = SphereEncoder::new(&mut ps, "enc", &cfg).unwrap();
    let x = Var::from_tensor(&Tensor::zeros((1, 5, 16, 32), DType::F64, &Device::Cpu).unwrap()).unwrap();
    let first = enc.forward_layers(x.as_tensor()).unwrap().remove(0);
    // pooled output cell covering columns 0-1 depends on input column 31
    let probe = first.narrow(3, 0, 1).unwrap().narrow(2, 3, 1).unwrap().sum_all().unwrap();
    let grads = probe.backward().unwrap();
    let g = grads.get(x.as_tensor()).unwrap();
    let seam: f64 = g.narrow(3, 31, 1).unwrap().narrow(1, 0, 3).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
    assert!(seam > 0.0);
}
