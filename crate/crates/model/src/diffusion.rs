//! Noise schedule, forward corruption, training objective and the ancestral
//! reverse step.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ModelError, Result};
use crate::nn::randn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Largest number of pairs pushed through the network at once; gradients
    /// are accumulated across chunks of a batch.
    pub micro_batch: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.5,
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 500,
            lr_decay_epochs: vec![375, 450],
            lr_decay_factor: 0.1,
            micro_batch: 4,
        }
    }
}

impl DiffusionConfig {
    /// Default settings for a run of `epochs`, with the decay milestones kept
    /// at the same fractions (3/4 and 9/10) of the run.
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            lr_decay_epochs: vec![epochs * 3 / 4, epochs * 9 / 10],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.micro_batch == 0 {
            return Err(ModelError::InvalidConfig("batch size, micro batch and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.lr_decay_factor > 0.0) {
            return Err(ModelError::InvalidConfig("learning rate and decay factor must be positive".into()));
        }
        if let Some(e) = self.lr_decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(ModelError::InvalidConfig(format!(
                "decay epoch {e} is not before the final epoch {}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&m| epoch > m).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

/// `beta[t - 1]` and `alphas_bar[t - 1]` hold the values for step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

/// `sqrt(beta_t)` linear in `t` from `sqrt(beta_min)` to `sqrt(beta_max)`.
pub fn make_quadratic_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(ModelError::InvalidRange(format!("need at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(ModelError::InvalidRange(format!("0 < {beta_min} < {beta_max} < 1 violated")));
    }
    let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
    let mut betas: Vec<f64> = (0..steps)
        .map(|i| (lo + i as f64 / (steps - 1) as f64 * (hi - lo)).powi(2))
        .collect();
    betas[0] = beta_min;
    betas[steps - 1] = beta_max;
    let mut alphas_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(ModelError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t - 1]
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` for each row, shaped
    /// `(B, 1, 1)`.
    fn coefficients(&self, steps: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        for &t in steps {
            self.check(t)?;
        }
        let a: Vec<f64> = steps.iter().map(|&t| self.alpha_bar(t).sqrt()).collect();
        let s: Vec<f64> = steps.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect();
        let shape = (steps.len(), 1, 1);
        Ok((
            Tensor::from_vec(a, shape, device)?.to_dtype(dtype)?,
            Tensor::from_vec(s, shape, device)?.to_dtype(dtype)?,
        ))
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` with one step
    /// per row of a `(B, 3, L)` batch.
    pub fn forward_sample(&self, x0: &Tensor, steps: &[usize], eps: &Tensor) -> Result<Tensor> {
        if x0.dims() != eps.dims() {
            return Err(shape_err(format!("{:?}", x0.dims()), eps.dims()));
        }
        if x0.dim(0)? != steps.len() {
            return Err(shape_err(format!("{} steps", x0.dim(0)?), steps.len()));
        }
        let (a, s) = self.coefficients(steps, x0.dtype(), x0.device())?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    /// One ancestral step from `x_t` given predicted noise; `z` is ignored at
    /// `t = 1`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        self.check(t)?;
        let beta = self.beta(t);
        let coef = beta / (1.0 - self.alpha_bar(t)).sqrt();
        let mean = ((x_t - (eps_hat * coef)?)? * (1.0 / (1.0 - beta).sqrt()))?;
        match z {
            Some(z) if t > 1 => Ok((mean + (z * beta.sqrt())?)?),
            None if t > 1 => Err(ModelError::InvalidConfig(format!("step {t} needs noise"))),
            _ => Ok(mean),
        }
    }

    /// Reverse step drawing `z` from `rng`.
    pub fn reverse_step_rng<R: Rng>(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, rng: &mut R) -> Result<Tensor> {
        if t > 1 {
            let z = randn(rng, x_t.dims(), x_t.dtype(), x_t.device())?;
            self.reverse_step(x_t, t, eps_hat, Some(&z))
        } else {
            self.reverse_step(x_t, t, eps_hat, None)
        }
    }
}

/// Uniform steps in `1..=T` and standard-normal noise for one training row.
pub fn draw_training_noise<R: Rng>(rng: &mut R, schedule: &NoiseSchedule, len: usize) -> (usize, Vec<f64>) {
    let t = rng.random_range(1..=schedule.steps());
    let eps = (0..3 * len).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    (t, eps)
}

/// Mean squared error between `eps` and the prediction on the corrupted
/// batch.
pub fn training_loss<F>(schedule: &NoiseSchedule, x0: &Tensor, steps: &[usize], eps: &Tensor, predict: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
{
    let x_t = schedule.forward_sample(x0, steps, eps)?;
    let eps_hat = predict(&x_t, steps)?;
    if eps_hat.dims() != eps.dims() {
        return Err(shape_err(format!("{:?}", eps.dims()), eps_hat.dims()));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule {
        make_quadratic_schedule(200, 1e-4, 0.5).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = schedule();
        assert_eq!(s.beta(1), 0.0001);
        assert_eq!(s.beta(200), 0.5);
        let mid = (0.01 + 99.0 / 199.0 * (0.5f64.sqrt() - 0.01)).powi(2);
        assert!((s.beta(100) - mid).abs() < 1e-15);
        assert!((s.beta(100) - 0.12731).abs() < 1e-5);
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alphas_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(200) < 1e-8 && s.alpha_bar(200) > 0.0);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        for (t, lo, hi) in [(1, 1e-4, 0.5), (200, 0.0, 0.5), (200, 0.5, 0.1), (200, 1e-4, 1.0)] {
            assert!(matches!(make_quadratic_schedule(t, lo, hi), Err(ModelError::InvalidRange(_))));
        }
    }

    #[test]
    fn forward_sample_limits() {
        let s = schedule();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[[1.0f64, -2.0], [0.5, 0.0], [3.0, 1.0]]], &dev).unwrap();
        let eps = Tensor::new(&[[[0.3f64, 0.1], [-1.0, 2.0], [0.0, 0.7]]], &dev).unwrap();
        let zero = x0.zeros_like().unwrap();
        let a = s.alpha_bar(50);
        let xt: Vec<f64> = s.forward_sample(&x0, &[50], &zero).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let x: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
        for (u, v) in xt.iter().zip(&x) {
            assert!((u - a.sqrt() * v).abs() < 1e-15);
        }
        let xt: Vec<f64> = s.forward_sample(&zero, &[50], &eps).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let e: Vec<f64> = eps.flatten_all().unwrap().to_vec1().unwrap();
        for (u, v) in xt.iter().zip(&e) {
            assert!((u - (1.0 - a).sqrt() * v).abs() < 1e-15);
        }
        assert!(matches!(s.forward_sample(&x0, &[0], &eps), Err(ModelError::StepOutOfRange { .. })));
        assert!(matches!(s.forward_sample(&x0, &[201], &eps), Err(ModelError::StepOutOfRange { .. })));
    }

    #[test]
    fn loss_of_perfect_and_null_predictors() {
        let s = schedule();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[4, 3, 834], DType::F64, &dev).unwrap();
        let eps = randn(&mut rng, &[4, 3, 834], DType::F64, &dev).unwrap();
        let steps = [1, 20, 100, 200];
        let e2 = eps.clone();
        let perfect: f64 = training_loss(&s, &x0, &steps, &eps, |_, _| Ok(e2)).unwrap().to_scalar().unwrap();
        assert_eq!(perfect, 0.0);
        let null: f64 = training_loss(&s, &x0, &steps, &eps, |x, _| Ok(x.zeros_like()?)).unwrap().to_scalar().unwrap();
        assert!((null - 1.0).abs() < 0.02, "{null}");
        assert!(null >= 0.0);
    }

    #[test]
    fn final_reverse_step_is_deterministic() {
        let s = schedule();
        let dev = Device::Cpu;
        let x = Tensor::new(&[[[0.2f64], [0.4], [-0.1]]], &dev).unwrap();
        let e = Tensor::new(&[[[0.5f64], [0.5], [0.5]]], &dev).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = s.reverse_step_rng(&x, 1, &e, &mut r1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = s.reverse_step_rng(&x, 1, &e, &mut r2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert!(matches!(s.reverse_step(&x, 5, &e, None), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn small_beta_reverse_step_is_near_identity() {
        let s = make_quadratic_schedule(200, 1e-12, 0.5).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::new(&[[[0.2f64, 0.7], [0.4, -3.0], [-0.1, 1.0]]], &dev).unwrap();
        let y = s.reverse_step(&x, 1, &x.zeros_like().unwrap(), None).unwrap();
        let diff: f64 = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-11);
    }

    #[test]
    fn oracle_noise_step_equals_posterior_mean() {
        let s = schedule();
        let dev = Device::Cpu;
        let t = 37;
        let x0 = Tensor::new(&[[[0.6f64, -0.3], [0.0, 0.8], [0.8, 0.5]]], &dev).unwrap();
        let eps = Tensor::new(&[[[1.2f64, -0.4], [0.3, 0.9], [-2.0, 0.1]]], &dev).unwrap();
        let xt = s.forward_sample(&x0, &[t], &eps).unwrap();
        let step = s.reverse_step(&xt, t, &eps, Some(&xt.zeros_like().unwrap())).unwrap();
        let (b, ab, ab_prev) = (s.beta(t), s.alpha_bar(t), s.alpha_bar(t - 1));
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let oracle = ((x0 * c0).unwrap() + (xt * ct).unwrap()).unwrap();
        let diff: f64 = (step - oracle).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn lr_milestones() {
        let c = DiffusionConfig::default();
        assert_eq!(c.lr_at(1), 1e-3);
        assert_eq!(c.lr_at(375), 1e-3);
        assert!((c.lr_at(376) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(451) - 1e-5).abs() < 1e-18);
        assert_eq!(DiffusionConfig::for_epochs(500), c);
        c.validate().unwrap();
        let bad = DiffusionConfig { lr_decay_epochs: vec![500], ..c };
        assert!(bad.validate().is_err());
    }
}
