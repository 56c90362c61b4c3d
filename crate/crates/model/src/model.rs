//! The conditional gaze diffusion model: encoder plus denoiser plus schedule,
//! with the ancestral sampler, the Adam training loop and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use gazediff_core::dataset::{GazeSequence, Panorama};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{draw_training_noise, make_quadratic_schedule, training_loss, DiffusionConfig, NoiseSchedule};
use crate::encoder::{coordconv_augment, EncoderConfig, SphereEncoder};
use crate::error::{shape_err, ModelError, Result};
use crate::nn::{randn, ParamStore};

pub const CHECKPOINT_VERSION: &str = "gazediff-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.diffusion.validate()?;
        if self.encoder.embed_dim != self.denoiser.cond_dim {
            return Err(ModelError::InvalidConfig(format!(
                "encoder emits {} values but the denoiser expects {}",
                self.encoder.embed_dim, self.denoiser.cond_dim
            )));
        }
        Ok(())
    }
}

pub struct GazeDiffusion {
    pub config: ModelConfig,
    params: ParamStore,
    pub encoder: SphereEncoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

impl GazeDiffusion {
    pub fn new(config: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let d = &config.diffusion;
        let schedule = make_quadratic_schedule(d.steps, d.beta_min, d.beta_max)?;
        let mut params = ParamStore::new(config.seed, dtype, device);
        let encoder = SphereEncoder::new(&mut params, "encoder", &config.encoder)?;
        let denoiser = Denoiser::new(&mut params, "denoiser", &config.denoiser, d.steps)?;
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            denoiser,
            schedule,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Coordinate-augmented `(5, H, W)` input for a panorama already at the
    /// encoder resolution.
    pub fn image_tensor(&self, img: &Panorama) -> Result<Tensor> {
        let (h, w) = img.native_size();
        if (h, w) != (self.config.encoder.height, self.config.encoder.width) {
            return Err(shape_err(
                format!("{}x{} panorama", self.config.encoder.height, self.config.encoder.width),
                (h, w),
            ));
        }
        coordconv_augment(img, self.dtype(), self.device())
    }

    /// Condition vectors `(N, m)` for `(N, 5, H, W)` images.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder.forward(images)
    }

    /// Training objective for `x0: (B, 3, L)`; row `i` is conditioned on
    /// `images[image_index[i]]`.
    pub fn loss(&self, x0: &Tensor, images: &Tensor, image_index: &[u32], steps: &[usize], eps: &Tensor) -> Result<Tensor> {
        let cond = self.encode(images)?;
        let idx = Tensor::from_slice(image_index, image_index.len(), self.device())?;
        let cond = cond.index_select(&idx, 0)?;
        training_loss(&self.schedule, x0, steps, eps, |x, s| self.denoiser.forward(x, s, &cond))
    }

    /// Runs the reverse chain from pure noise for each rng, conditioned on a
    /// single `(1, m)` or `(m,)` vector. Every row draws all of its noise from
    /// its own rng, so results do not depend on how rows are batched.
    pub fn sample_channels(&self, cond: &Tensor, len: usize, rngs: &mut [ChaCha8Rng]) -> Result<Vec<Vec<f64>>> {
        let m = self.config.denoiser.cond_dim;
        let cond = cond.reshape((1, m))?.detach();
        let chunk = self.config.diffusion.micro_batch.max(1);
        let mut out = Vec::with_capacity(rngs.len());
        for group in rngs.chunks_mut(chunk) {
            let n = group.len();
            let cond_b = cond.broadcast_as((n, m))?.contiguous()?;
            let draw = |group: &mut [ChaCha8Rng]| -> Result<Tensor> {
                let rows = group
                    .iter_mut()
                    .map(|r| randn(r, &[3, len], self.dtype(), self.device()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&rows, 0)?)
            };
            let mut x = draw(group)?;
            for t in (1..=self.schedule.steps()).rev() {
                let eps_hat = self.denoiser.forward(&x, &vec![t; n], &cond_b)?.detach();
                let z = if t > 1 { Some(draw(group)?) } else { None };
                x = self.schedule.reverse_step(&x, t, &eps_hat, z.as_ref())?.detach();
            }
            let x = x.to_dtype(DType::F64)?;
            for i in 0..n {
                out.push(x.get(i)?.flatten_all()?.to_vec1::<f64>()?);
            }
        }
        Ok(out)
    }

    /// Samples one sequence per seed for `img`. Returns each sequence with
    /// the mean relative norm change of its projection onto the sphere.
    pub fn sample_sequences(
        &self,
        img: &Panorama,
        image_id: &str,
        len: usize,
        sample_rate: f64,
        seeds: &[u64],
    ) -> Result<Vec<(GazeSequence, f64)>> {
        let x = self.image_tensor(img)?.unsqueeze(0)?;
        let cond = self.encode(&x)?.detach();
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let rows = self.sample_channels(&cond, len, &mut rngs)?;
        rows.iter()
            .enumerate()
            .map(|(i, v)| {
                let observer = format!("sample_{i:03}");
                GazeSequence::from_channel_major(v, sample_rate, observer, image_id).map_err(|e| {
                    ModelError::InvalidConfig(format!("sampled sequence {i} is degenerate: {e}"))
                })
            })
            .collect()
    }
}

/// Equal-length training sequences paired with their panoramas.
pub struct TrainingSet {
    images: Vec<Tensor>,
    sequences: Vec<Tensor>,
    image_of: Vec<usize>,
    len: usize,
}

impl TrainingSet {
    /// `pairs` hold a sequence and the index of its panorama in `images`.
    pub fn new(model: &GazeDiffusion, images: &[Panorama], pairs: &[(GazeSequence, usize)]) -> Result<Self> {
        let first = pairs.first().ok_or(ModelError::DataEmpty)?;
        let len = first.0.len();
        let images = images.iter().map(|img| model.image_tensor(img)).collect::<Result<Vec<_>>>()?;
        let mut sequences = Vec::with_capacity(pairs.len());
        let mut image_of = Vec::with_capacity(pairs.len());
        for (seq, img) in pairs {
            if seq.len() != len {
                return Err(shape_err(format!("length {len}"), seq.len()));
            }
            if *img >= images.len() {
                return Err(shape_err(format!("image index below {}", images.len()), img));
            }
            let t = Tensor::from_vec(seq.to_channel_major(), (3, len), model.device())?.to_dtype(model.dtype())?;
            sequences.push(t);
            image_of.push(*img);
        }
        Ok(Self { images, sequences, image_of, len })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence_len(&self) -> usize {
        self.len
    }

    /// Stacked `(x0, images, image_index)` for a set of pair indices, with
    /// each distinct image encoded once.
    fn gather(&self, pairs: &[usize]) -> Result<(Tensor, Tensor, Vec<u32>)> {
        let mut unique: Vec<usize> = Vec::new();
        let mut index = Vec::with_capacity(pairs.len());
        for &p in pairs {
            let img = self.image_of[p];
            let pos = unique.iter().position(|&u| u == img).unwrap_or_else(|| {
                unique.push(img);
                unique.len() - 1
            });
            index.push(pos as u32);
        }
        let x0 = Tensor::stack(&pairs.iter().map(|&p| &self.sequences[p]).collect::<Vec<_>>(), 0)?;
        let imgs = Tensor::stack(&unique.iter().map(|&u| &self.images[u]).collect::<Vec<_>>(), 0)?;
        Ok((x0, imgs, index))
    }
}

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn update(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(name) else { continue };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let delta = ((&m / bc1)? / denom)?;
            let theta = (var.as_tensor().detach() - (delta * lr)?)?;
            var.set(&theta)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

pub struct Trainer {
    pub model: GazeDiffusion,
    pub adam: Adam,
    /// Epochs already completed.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: GazeDiffusion) -> Self {
        Self { model, adam: Adam::default(), epoch: 0 }
    }

    fn epoch_rng(&self, epoch: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(2 * epoch as u64 + stream);
        rng
    }

    /// Mean loss of `batch` and its gradients, accumulated in micro batches.
    fn loss_and_grads(&self, data: &TrainingSet, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let model = &self.model;
        let len = data.sequence_len();
        let draws: Vec<(usize, Vec<f64>)> = batch.iter().map(|_| draw_training_noise(rng, &model.schedule, len)).collect();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0;
        let mut offset = 0;
        for chunk in batch.chunks(model.config.diffusion.micro_batch) {
            let (x0, imgs, index) = data.gather(chunk)?;
            let part = &draws[offset..offset + chunk.len()];
            offset += chunk.len();
            let steps: Vec<usize> = part.iter().map(|d| d.0).collect();
            let eps: Vec<f64> = part.iter().flat_map(|d| d.1.iter().copied()).collect();
            let eps = Tensor::from_vec(eps, (chunk.len(), 3, len), model.device())?.to_dtype(model.dtype())?;
            let loss = model.loss(&x0, &imgs, &index, &steps, &eps)?;
            let scaled = (loss * (chunk.len() as f64 / batch.len() as f64))?;
            total += scaled.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let gs = scaled.backward()?;
            for (name, var) in model.params().vars() {
                if let Some(g) = gs.get(var.as_tensor()) {
                    let acc = match grads.remove(name) {
                        Some(prev) => (prev + g)?,
                        None => g.clone(),
                    };
                    grads.insert(name.clone(), acc);
                }
            }
        }
        Ok((total, grads))
    }

    /// One Adam update on `batch`; returns the batch loss before the update.
    pub fn step(&mut self, data: &TrainingSet, batch: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(data, batch, rng)?;
        self.adam.update(self.model.params(), &grads, lr)?;
        Ok(loss)
    }

    /// Loss of `batch` without touching the parameters.
    pub fn batch_loss(&self, data: &TrainingSet, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
        let model = &self.model;
        let len = data.sequence_len();
        let mut total = 0.0;
        for chunk in batch.chunks(model.config.diffusion.micro_batch) {
            let (x0, imgs, index) = data.gather(chunk)?;
            let draws: Vec<(usize, Vec<f64>)> = chunk.iter().map(|_| draw_training_noise(rng, &model.schedule, len)).collect();
            let steps: Vec<usize> = draws.iter().map(|d| d.0).collect();
            let eps: Vec<f64> = draws.iter().flat_map(|d| d.1.iter().copied()).collect();
            let eps = Tensor::from_vec(eps, (chunk.len(), 3, len), model.device())?.to_dtype(model.dtype())?;
            let loss = model.loss(&x0, &imgs, &index, &steps, &eps)?.detach();
            total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss over every pair using noise fixed by `seed`.
    pub fn dataset_loss(&self, data: &TrainingSet, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<usize> = (0..data.len()).collect();
        self.batch_loss(data, &all, &mut rng)
    }

    /// One shuffled pass over all pairs.
    pub fn train_epoch(&mut self, data: &TrainingSet) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(ModelError::DataEmpty);
        }
        let epoch = self.epoch + 1;
        let lr = self.model.config.diffusion.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.epoch_rng(epoch, 0));
        let mut noise = self.epoch_rng(epoch, 1);
        let bs = self.model.config.diffusion.batch_size;
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(bs) {
            sum += self.step(data, batch, lr, &mut noise)? * batch.len() as f64;
            steps += 1;
        }
        self.epoch = epoch;
        Ok(EpochStats {
            epoch,
            mean_loss: sum / data.len() as f64,
            learning_rate: lr,
            steps,
        })
    }

    /// Trains until the configured epoch count, calling `on_epoch` after
    /// every epoch.
    pub fn train<F>(&mut self, data: &TrainingSet, mut on_epoch: F) -> Result<Vec<EpochStats>>
    where
        F: FnMut(&EpochStats, &Trainer) -> Result<()>,
    {
        let mut history = Vec::new();
        while self.epoch < self.model.config.diffusion.epochs {
            let stats = self.train_epoch(data)?;
            on_epoch(&stats, self)?;
            history.push(stats);
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        load_checkpoint(path, device)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub format_version: String,
    pub config: ModelConfig,
    pub epoch: usize,
    pub adam_step: u64,
    pub dtype: String,
}

fn ckpt_err(path: &Path, message: impl ToString) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

/// Parameters, Adam moments and the schedule table in one safetensors file,
/// with the config, epoch and format version in the header metadata.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let model = &trainer.model;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.params().vars() {
        tensors.push((format!("param.{name}"), var.as_tensor().detach()));
        if let Some(m) = trainer.adam.m.get(name) {
            tensors.push((format!("adam_m.{name}"), m.clone()));
        }
        if let Some(v) = trainer.adam.v.get(name) {
            tensors.push((format!("adam_v.{name}"), v.clone()));
        }
    }
    let steps = model.schedule.steps();
    tensors.push((
        "schedule.betas".into(),
        Tensor::from_slice(&model.schedule.betas, steps, &Device::Cpu)?,
    ));
    tensors.push((
        "schedule.alphas_bar".into(),
        Tensor::from_slice(&model.schedule.alphas_bar, steps, &Device::Cpu)?,
    ));
    let info = CheckpointInfo {
        format_version: CHECKPOINT_VERSION.into(),
        config: model.config.clone(),
        epoch: trainer.epoch,
        adam_step: trainer.adam.step,
        dtype: dtype_name(model.dtype()).into(),
    };
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), info.format_version.clone());
    meta.insert(
        "info".to_string(),
        serde_json::to_string(&info).map_err(|e| ckpt_err(path, e))?,
    );
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ckpt_err(path, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp).map_err(|e| ckpt_err(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ckpt_err(path, e))?;
    Ok(())
}

pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    info_from_bytes(path, &bytes)
}

fn info_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointInfo> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = header.metadata().as_ref().ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    match meta.get("format_version") {
        Some(v) if v == CHECKPOINT_VERSION => {}
        other => return Err(ckpt_err(path, format!("unsupported format {other:?}"))),
    }
    let info = meta.get("info").ok_or_else(|| ckpt_err(path, "missing info"))?;
    serde_json::from_str(info).map_err(|e| ckpt_err(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let info = info_from_bytes(path, &bytes)?;
    let dtype = if info.dtype == "f64" { DType::F64 } else { DType::F32 };
    let model = GazeDiffusion::new(&info.config, dtype, device)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut params = BTreeMap::new();
    let mut adam = Adam { step: info.adam_step, ..Adam::default() };
    for (key, t) in tensors {
        if let Some(name) = key.strip_prefix("param.") {
            params.insert(name.to_string(), t);
        } else if let Some(name) = key.strip_prefix("adam_m.") {
            adam.m.insert(name.to_string(), t.to_dtype(dtype)?);
        } else if let Some(name) = key.strip_prefix("adam_v.") {
            adam.v.insert(name.to_string(), t.to_dtype(dtype)?);
        } else if key == "schedule.betas" {
            let betas: Vec<f64> = t.to_vec1()?;
            if betas != model.schedule.betas {
                return Err(ckpt_err(path, "stored schedule does not match the config"));
            }
        }
    }
    model.params().load(&params).map_err(|e| ckpt_err(path, e))?;
    Ok(Trainer { model, adam, epoch: info.epoch })
}
