//! Small differentiable building blocks over a named, seeded parameter store.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
}

/// Trainable parameters keyed by dotted path, iterated in name order.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`, which must cover exactly the
    /// same names and shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(shape_err(format!("{name} {:?}", var.dims()), t.dims()));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(ModelError::InvalidConfig(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(ps, name, in_dim, out_dim, Init::FanIn(in_dim), true)
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[out_dim], init)?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| shape_err("rank >= 1", &dims))?;
        if last != self.in_dim {
            return Err(shape_err(format!("last axis {}", self.in_dim), &dims));
        }
        let rows = x.elem_count() / last;
        let flat = x.contiguous()?.reshape((rows, last))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head self-attention over axis 1 of `(batch, tokens, dim)`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub in_proj: Linear,
    pub out_proj: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::InvalidConfig(format!("{dim} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            in_proj: Linear::new(ps, &format!("{name}.in_proj"), dim, 3 * dim)?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, s, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self.in_proj.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * self.dim, self.dim)?
                .reshape((n, s, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, s, c))?;
        self.out_proj.forward(&ctx)
    }
}

/// Post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: SelfAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        Ok(Self {
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, ff_dim)?,
            ff2: Linear::new(ps, &format!("{name}.ff2"), ff_dim, dim)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn param_count(dim: usize, ff_dim: usize) -> usize {
        Linear::param_count(dim, 3 * dim, true)
            + Linear::param_count(dim, dim, true)
            + 2 * 2 * dim
            + Linear::param_count(dim, ff_dim, true)
            + Linear::param_count(ff_dim, dim, true)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&(x + self.attn.forward(x)?)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h)?.gelu_erf()?)?;
        self.norm2.forward(&(h + ff)?)
    }
}

/// `[sin(p / tau^(i/half)) for i < half] ++ [cos(...)]` for every position,
/// row-major `(positions, dim)`.
pub fn sinusoidal_table(positions: &[f64], dim: usize, tau: f64) -> Vec<f64> {
    let half = dim / 2;
    let inv: Vec<f64> = (0..half).map(|i| tau.powf(-(i as f64) / half as f64)).collect();
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        out.extend(inv.iter().map(|f| (p * f).sin()));
        out.extend(inv.iter().map(|f| (p * f).cos()));
    }
    out
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}
