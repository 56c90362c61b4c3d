//! Noise-prediction network: a gated residual stack with dilated temporal
//! convolutions and temporal/feature self-attention.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ModelError, Result};
use crate::nn::{sinusoidal_table, Init, Linear, ParamStore, TransformerLayer};

pub const COORD_CHANNELS: usize = 3;
pub const TIME_EMBED_DIM: usize = 128;
pub const FEATURE_EMBED_DIM: usize = 16;
pub const STEP_EMBED_DIM: usize = 128;
pub const TIME_TAU: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampUnit {
    /// `S_l = l` for `l = 1..=L`.
    Index,
    /// `S_l = (l - 1) / sample_rate`.
    Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub residual_layers: usize,
    pub channels: usize,
    pub attention_heads: usize,
    pub ff_dim: usize,
    pub dilations: Vec<usize>,
    pub cond_dim: usize,
    pub timestamp_unit: TimestampUnit,
    pub sample_rate: f64,
    pub zero_init_output: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            residual_layers: 4,
            channels: 64,
            attention_heads: 8,
            ff_dim: 64,
            dilations: vec![1, 2, 4, 8],
            cond_dim: 64,
            timestamp_unit: TimestampUnit::Index,
            sample_rate: 30.0,
            zero_init_output: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.residual_layers == 0 || self.channels == 0 || self.ff_dim == 0 || self.dilations.is_empty() {
            return Err(ModelError::InvalidConfig("denoiser sizes must be positive".into()));
        }
        if self.attention_heads == 0 || self.channels % self.attention_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.attention_heads
            )));
        }
        if self.dilations.contains(&0) {
            return Err(ModelError::InvalidConfig("dilations must be positive".into()));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilations[layer % self.dilations.len()]
    }
}

/// Exact number of learnable scalars in a denoiser built from `config`.
pub fn parameter_count(config: &DenoiserConfig) -> usize {
    let c = config.channels;
    let side = TIME_EMBED_DIM + FEATURE_EMBED_DIM;
    let per_layer = Linear::param_count(STEP_EMBED_DIM, c, true)
        + Linear::param_count(3 * c, c, true)
        + 2 * TransformerLayer::param_count(c, config.ff_dim)
        + Linear::param_count(c, 2 * c, true)
        + Linear::param_count(side, 2 * c, true)
        + Linear::param_count(c, 2 * c, true);
    Linear::param_count(1 + config.cond_dim, c, true)
        + 2 * Linear::param_count(STEP_EMBED_DIM, STEP_EMBED_DIM, true)
        + COORD_CHANNELS * FEATURE_EMBED_DIM
        + config.residual_layers * per_layer
        + Linear::param_count(c, c, true)
        + Linear::param_count(c, 1, true)
}

/// Sinusoidal embedding of timestamps `S_1..S_L`, row-major `(L, 128)`.
pub fn time_embedding(timestamps: &[f64]) -> Vec<f64> {
    sinusoidal_table(timestamps, TIME_EMBED_DIM, TIME_TAU)
}

pub fn timestamps(len: usize, unit: TimestampUnit, sample_rate: f64) -> Vec<f64> {
    match unit {
        TimestampUnit::Index => (1..=len).map(|l| l as f64).collect(),
        TimestampUnit::Seconds => (0..len).map(|l| l as f64 / sample_rate).collect(),
    }
}

#[derive(Debug, Clone)]
struct ResidualLayer {
    step_proj: Linear,
    conv: Linear,
    dilation: usize,
    temporal: TransformerLayer,
    feature: TransformerLayer,
    mid_proj: Linear,
    side_proj: Linear,
    out_proj: Linear,
    channels: usize,
}

impl ResidualLayer {
    fn new(ps: &mut ParamStore, name: &str, cfg: &DenoiserConfig, layer: usize) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            step_proj: Linear::new(ps, &format!("{name}.step_proj"), STEP_EMBED_DIM, c)?,
            conv: Linear::new(ps, &format!("{name}.dilated_conv"), 3 * c, c)?,
            dilation: cfg.dilation(layer),
            temporal: TransformerLayer::new(ps, &format!("{name}.temporal"), c, cfg.attention_heads, cfg.ff_dim)?,
            feature: TransformerLayer::new(ps, &format!("{name}.feature"), c, cfg.attention_heads, cfg.ff_dim)?,
            mid_proj: Linear::new(ps, &format!("{name}.mid_proj"), c, 2 * c)?,
            side_proj: Linear::new(ps, &format!("{name}.side_proj"), TIME_EMBED_DIM + FEATURE_EMBED_DIM, 2 * c)?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), c, 2 * c)?,
            channels: c,
        })
    }

    /// Kernel-3 convolution along L with taps at `l - d`, `l`, `l + d`.
    fn dilated_conv(&self, y: &Tensor) -> Result<Tensor> {
        let l = y.dim(2)?;
        let d = self.dilation;
        let padded = y.pad_with_zeros(2, d, d)?;
        let taps = Tensor::cat(&[padded.narrow(2, 0, l)?, padded.narrow(2, d, l)?, padded.narrow(2, 2 * d, l)?], 3)?;
        self.conv.forward(&taps)
    }

    fn temporal(&self, y: &Tensor) -> Result<Tensor> {
        let (b, k, l, c) = y.dims4()?;
        Ok(self.temporal.forward(&y.reshape((b * k, l, c))?)?.reshape((b, k, l, c))?)
    }

    fn feature(&self, y: &Tensor) -> Result<Tensor> {
        let (b, k, l, c) = y.dims4()?;
        let per_step = y.permute((0, 2, 1, 3))?.contiguous()?.reshape((b * l, k, c))?;
        Ok(self
            .feature
            .forward(&per_step)?
            .reshape((b, l, k, c))?
            .permute((0, 2, 1, 3))?
            .contiguous()?)
    }

    /// Returns the updated hidden state and this layer's skip output.
    fn forward(&self, h: &Tensor, step: &Tensor, side: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, _, _, c) = h.dims4()?;
        let s = self.step_proj.forward(step)?.reshape((b, 1, 1, c))?;
        let y = h.broadcast_add(&s)?;
        let y = self.dilated_conv(&y)?;
        let y = self.temporal(&y)?;
        let y = self.feature(&y)?;
        let y = self.mid_proj.forward(&y)?.broadcast_add(&self.side_proj.forward(side)?)?;
        let gate = y.narrow(D::Minus1, 0, self.channels)?;
        let filter = y.narrow(D::Minus1, self.channels, self.channels)?;
        let y = (candle_nn::ops::sigmoid(&gate)? * filter.tanh()?)?;
        let y = self.out_proj.forward(&y)?;
        let residual = y.narrow(D::Minus1, 0, self.channels)?;
        let skip = y.narrow(D::Minus1, self.channels, self.channels)?;
        Ok((((h + residual)? / std::f64::consts::SQRT_2)?, skip))
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    input_proj: Linear,
    step_fc1: Linear,
    step_fc2: Linear,
    feature_embed: Tensor,
    layers: Vec<ResidualLayer>,
    head1: Linear,
    head2: Linear,
    max_step: usize,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, name: &str, config: &DenoiserConfig, max_step: usize) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let layers = (0..config.residual_layers)
            .map(|i| ResidualLayer::new(ps, &format!("{name}.layer{i}"), config, i))
            .collect::<Result<Vec<_>>>()?;
        let out_init = if config.zero_init_output { Init::Zeros } else { Init::FanIn(c) };
        Ok(Self {
            input_proj: Linear::new(ps, &format!("{name}.input_proj"), 1 + config.cond_dim, c)?,
            step_fc1: Linear::new(ps, &format!("{name}.step_fc1"), STEP_EMBED_DIM, STEP_EMBED_DIM)?,
            step_fc2: Linear::new(ps, &format!("{name}.step_fc2"), STEP_EMBED_DIM, STEP_EMBED_DIM)?,
            feature_embed: ps.param(
                &format!("{name}.feature_embed"),
                &[COORD_CHANNELS, FEATURE_EMBED_DIM],
                Init::Normal(1.0),
            )?,
            layers,
            head1: Linear::new(ps, &format!("{name}.head1"), c, c)?,
            head2: Linear::with_init(ps, &format!("{name}.head2"), c, 1, out_init, true)?,
            config: config.clone(),
            max_step,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn dtype(&self) -> DType {
        self.feature_embed.dtype()
    }

    /// Sinusoid of each step passed through the two-layer SiLU MLP, `(B, 128)`.
    pub fn step_embedding(&self, steps: &[usize]) -> Result<Tensor> {
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.max_step) {
            return Err(ModelError::StepOutOfRange { t, max: self.max_step });
        }
        let pos: Vec<f64> = steps.iter().map(|&t| t as f64).collect();
        let table = sinusoidal_table(&pos, STEP_EMBED_DIM, TIME_TAU);
        let x = Tensor::from_vec(table, (steps.len(), STEP_EMBED_DIM), self.feature_embed.device())?.to_dtype(self.dtype())?;
        self.step_fc2.forward(&self.step_fc1.forward(&x)?.silu()?)?.silu().map_err(Into::into)
    }

    /// Time embedding tiled over channels joined with the learned feature
    /// embedding tiled over time, `(3, L, 144)`.
    pub fn side_info(&self, len: usize) -> Result<Tensor> {
        let ts = timestamps(len, self.config.timestamp_unit, self.config.sample_rate);
        let dev = self.feature_embed.device();
        let time = Tensor::from_vec(time_embedding(&ts), (1, len, TIME_EMBED_DIM), dev)?
            .to_dtype(self.dtype())?
            .broadcast_as((COORD_CHANNELS, len, TIME_EMBED_DIM))?;
        let feat = self
            .feature_embed
            .unsqueeze(1)?
            .broadcast_as((COORD_CHANNELS, len, FEATURE_EMBED_DIM))?;
        Ok(Tensor::cat(&[time, feat], 2)?)
    }

    /// `x_t: (B, 3, L)`, one step per row, `cond: (B, m)`; returns `(B, 3, L)`.
    pub fn forward(&self, x_t: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, k, l) = x_t.dims3()?;
        if k != COORD_CHANNELS || l == 0 {
            return Err(shape_err("(B, 3, L)", x_t.dims()));
        }
        if steps.len() != b {
            return Err(shape_err(format!("{b} diffusion steps"), steps.len()));
        }
        if cond.dims() != [b, self.config.cond_dim] {
            return Err(shape_err(format!("({b}, {})", self.config.cond_dim), cond.dims()));
        }
        let m = self.config.cond_dim;
        let tiled = cond.reshape((b, 1, 1, m))?.broadcast_as((b, k, l, m))?;
        let input = Tensor::cat(&[x_t.unsqueeze(3)?, tiled], 3)?;
        let mut h = self.input_proj.forward(&input)?.relu()?;
        let step = self.step_embedding(steps)?;
        let side = self.side_info(l)?;
        let mut skips: Option<Tensor> = None;
        for layer in &self.layers {
            let (next, skip) = layer.forward(&h, &step, &side)?;
            h = next;
            skips = Some(match skips {
                None => skip,
                Some(s) => (s + skip)?,
            });
        }
        let s = (skips.expect("at least one layer") / (self.layers.len() as f64).sqrt())?;
        let out = self.head2.forward(&self.head1.forward(&s)?.relu()?)?;
        Ok(out.squeeze(3)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            residual_layers: 2,
            channels: 8,
            attention_heads: 2,
            ff_dim: 8,
            dilations: vec![1, 2],
            cond_dim: 4,
            zero_init_output: false,
            ..DenoiserConfig::default()
        }
    }

    fn build(cfg: &DenoiserConfig, dtype: DType) -> (ParamStore, Denoiser) {
        let mut ps = ParamStore::new(11, dtype, &Device::Cpu);
        let d = Denoiser::new(&mut ps, "den", cfg, 200).unwrap();
        (ps, d)
    }

    #[test]
    fn count_matches_store() {
        for cfg in [DenoiserConfig::default(), tiny()] {
            let (ps, _) = build(&cfg, DType::F32);
            assert_eq!(ps.element_count(), parameter_count(&cfg));
        }
    }

    #[test]
    fn doubling_channels_more_than_doubles_count() {
        let base = DenoiserConfig::default();
        let wide = DenoiserConfig { channels: 128, ..base.clone() };
        assert!(parameter_count(&wide) > 2 * parameter_count(&base));
    }

    #[test]
    fn zero_head_outputs_zero() {
        let cfg = DenoiserConfig { zero_init_output: true, ..tiny() };
        let (_, d) = build(&cfg, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, &[2, 3, 9], DType::F32, &Device::Cpu).unwrap();
        let c = randn(&mut rng, &[2, 4], DType::F32, &Device::Cpu).unwrap();
        let y: Vec<f32> = d.forward(&x, &[3, 150], &c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_embedding_is_injective_and_validated() {
        let (_, d) = build(&tiny(), DType::F64);
        let steps: Vec<usize> = (1..=200).collect();
        let e: Vec<Vec<f64>> = d.step_embedding(&steps).unwrap().to_vec2().unwrap();
        assert_eq!(e[0].len(), STEP_EMBED_DIM);
        for i in 0..200 {
            for j in i + 1..200 {
                assert!(e[i] != e[j], "steps {} and {} collide", i + 1, j + 1);
            }
        }
        let single = d.step_embedding(&[7]).unwrap().to_vec2::<f64>().unwrap().remove(0);
        assert_eq!(d.step_embedding(&[7]).unwrap().to_vec2::<f64>().unwrap()[0], single);
        assert!(single.iter().zip(&e[6]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(d.step_embedding(&[0]), Err(ModelError::StepOutOfRange { .. })));
        assert!(matches!(d.step_embedding(&[201]), Err(ModelError::StepOutOfRange { .. })));
    }

    #[test]
    fn rejects_bad_shapes() {
        let (_, d) = build(&tiny(), DType::F32);
        let x = Tensor::zeros((1, 2, 5), DType::F32, &Device::Cpu).unwrap();
        let c = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x, &[1], &c), Err(ModelError::ShapeMismatch { .. })));
        let x = Tensor::zeros((1, 3, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&x, &[1, 2], &c), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn batch_permutation_commutes() {
        let (_, d) = build(&tiny(), DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 3, 7], DType::F64, &Device::Cpu).unwrap();
        let c = randn(&mut rng, &[3, 4], DType::F64, &Device::Cpu).unwrap();
        let steps = [4, 90, 200];
        let y = d.forward(&x, &steps, &c).unwrap();
        let perm = [2u32, 0, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let xp = x.index_select(&idx, 0).unwrap();
        let cp = c.index_select(&idx, 0).unwrap();
        let yp = d.forward(&xp, &[200, 4, 90], &cp).unwrap();
        let expect = y.index_select(&idx, 0).unwrap();
        let diff: f64 = (yp - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn temporal_block_commutes_with_feature_shuffle() {
        let (_, d) = build(&tiny(), DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = randn(&mut rng, &[2, 3, 6, 8], DType::F64, &Device::Cpu).unwrap();
        let layer = &d.layers[0];
        let out = layer.temporal(&y).unwrap();
        let idx = Tensor::new(&[1u32, 2, 0], &Device::Cpu).unwrap();
        let shuffled = layer.temporal(&y.index_select(&idx, 1).unwrap()).unwrap();
        let unshuffle = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let back = shuffled.index_select(&unshuffle, 1).unwrap();
        let diff: f64 = (back - out).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn repeat_calls_are_bit_identical() {
        let (_, d) = build(&tiny(), DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[2, 3, 11], DType::F32, &Device::Cpu).unwrap();
        let c = randn(&mut rng, &[2, 4], DType::F32, &Device::Cpu).unwrap();
        let a: Vec<f32> = d.forward(&x, &[1, 2], &c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = d.forward(&x, &[1, 2], &c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn side_info_layout() {
        let (_, d) = build(&tiny(), DType::F64);
        let s: Vec<Vec<Vec<f64>>> = d.side_info(4).unwrap().to_vec3().unwrap();
        assert_eq!((s.len(), s[0].len(), s[0][0].len()), (3, 4, 144));
        // index timestamps start at 1
        assert!((s[2][0][0] - 1f64.sin()).abs() < 1e-15);
        let feat: Vec<Vec<f64>> = d.feature_embed.to_vec2().unwrap();
        assert_eq!(&s[1][3][128..], &feat[1][..]);
    }
}
