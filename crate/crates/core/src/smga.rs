//! Pose stage: an audio-conditioned pose denoiser with separate face and body
//! branches.
//!
//! The noisy pose (plus the repeated initial pose) is split with the channel
//! masks, each half is encoded and run through its own stack of motion
//! blocks (self-attention, FiLM, audio cross-attention), and a merge block
//! concatenates the branches, applies a last FiLM and projects back to pose
//! space. The network predicts the clean pose.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::losses::{coordinate_mask, total_smga_loss, LossRecord, LossWeights};
use crate::maskgen::{motion_masks, MotionMasks};
use crate::nn::{
    ensure_finite, silu, sinusoid_table, timestep_embedding, Attention, Init, LayerNorm, Linear, ParamStore,
    Scope,
};
use crate::pose::{make_spatial_masks, AudioFeatureSequence, KeypointLayout, PoseSequence};
use crate::rng::CounterRng;
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmgaConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub audio_dim: usize,
    pub blocks_per_branch: usize,
    pub max_frames: usize,
    pub layout: KeypointLayout,
    pub use_film: bool,
    pub use_audio: bool,
}

impl Default for SmgaConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_heads: 4,
            audio_dim: 8,
            blocks_per_branch: 2,
            max_frames: 64,
            layout: KeypointLayout::toy16(),
            use_film: true,
            use_audio: true,
        }
    }
}

impl SmgaConfig {
    pub fn pose_dim(&self) -> usize {
        self.layout.total_channels * 3
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(MmgtError::invalid(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.audio_dim == 0 || self.max_frames == 0 || self.blocks_per_branch == 0 {
            return Err(MmgtError::invalid("audio_dim, max_frames and blocks_per_branch must be positive"));
        }
        Ok(())
    }
}

/// Predicts per-channel `gamma` and `beta` from the conditioning signal.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    pub proj: Linear,
    channels: usize,
}

impl FilmGenerator {
    pub fn new(scope: &mut Scope, cond_dim: usize, channels: usize) -> Result<Self> {
        let bound = 0.1 / (cond_dim as f64).sqrt();
        let mut bias = vec![1.0; channels];
        bias.extend(std::iter::repeat(0.0).take(channels));
        Ok(Self {
            proj: Linear::with_init(scope, cond_dim, 2 * channels, Init::Uniform(bound), Init::Values(bias))?,
            channels,
        })
    }

    /// `(gamma, beta)`, each shaped like the conditioning with `channels` features.
    pub fn generate(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.proj.forward(&silu(cond)?)?;
        if gb.dims().last() != Some(&(2 * self.channels)) {
            return Err(MmgtError::shape("FiLM generator output must be 2 x channels"));
        }
        let last = gb.rank() - 1;
        Ok((gb.narrow(last, 0, self.channels)?, gb.narrow(last, self.channels, self.channels)?))
    }

    pub fn forward(&self, features: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = self.generate(cond)?;
        film(features, &gamma, &beta)
    }
}

/// `gamma * F + beta`, broadcasting over time when the modulation has one frame.
pub fn film(features: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = *features.dims().last().unwrap_or(&0);
    if gamma.dims().last() != Some(&c) || beta.dims().last() != Some(&c) {
        return Err(MmgtError::shape(format!(
            "FiLM modulation width differs from {c} feature channels"
        )));
    }
    Ok(features.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

#[derive(Debug, Clone)]
pub struct MotionBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub film: FilmGenerator,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
}

impl MotionBlock {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(&mut scope.sub("norm_self"), dim)?,
            self_attn: Attention::new(&mut scope.sub("self_attn"), dim, dim, dim, heads)?,
            film: FilmGenerator::new(&mut scope.sub("film"), dim, dim)?,
            norm_cross: LayerNorm::new(&mut scope.sub("norm_cross"), dim)?,
            cross_attn: Attention::new(&mut scope.sub("cross_attn"), dim, dim, dim, heads)?,
        })
    }

    /// `f += SA(LN f)`, `f = FiLM(f)`, `f += CA(LN f, audio)`.
    pub fn forward(&self, f: &Tensor, audio: &Tensor, cond: &Tensor, use_film: bool) -> Result<Tensor> {
        let h = self.norm_self.forward(f)?;
        let mut f = (f + self.self_attn.forward(&h, &h)?)?;
        if use_film {
            f = self.film.forward(&f, cond)?;
        }
        let h = self.norm_cross.forward(&f)?;
        Ok((&f + self.cross_attn.forward(&h, audio)?)?)
    }
}

pub struct SmgaModel {
    pub config: SmgaConfig,
    face_mask: Tensor,
    body_mask: Tensor,
    pub enc_face: Linear,
    pub enc_body: Linear,
    pub pos_face: Tensor,
    pub pos_body: Tensor,
    pub enc_audio: Linear,
    pub pos_audio: Tensor,
    pub null_audio: Tensor,
    pub time_in: Linear,
    pub time_out: Linear,
    pub face_blocks: Vec<MotionBlock>,
    pub body_blocks: Vec<MotionBlock>,
    pub merge_film: FilmGenerator,
    pub out: Linear,
}

/// Branch activations before the merge block.
pub struct BranchFeatures {
    pub face: Tensor,
    pub body: Tensor,
    pub cond: Tensor,
}

impl SmgaModel {
    pub fn new(config: SmgaConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let (mf, mb) = make_spatial_masks(&config.layout)?;
        let dtype = store.dtype();
        let dev = store.device().clone();
        let expand = |m: &crate::pose::SpatialMask| -> Result<Tensor> {
            let v: Vec<f32> = m.values.iter().flat_map(|&x| [x as f32; 3]).collect();
            Ok(Tensor::from_vec(v, (1, 1, m.len() * 3), &dev)?.to_dtype(dtype)?)
        };
        let face_mask = expand(&mf)?;
        let body_mask = expand(&mb)?;
        let (d, p, a) = (config.model_dim, config.pose_dim(), config.audio_dim);
        let table = sinusoid_table(config.max_frames, d);
        let mut root = store.root();
        let enc_face = Linear::new(&mut root.sub("enc_face"), p, d)?;
        let enc_body = Linear::new(&mut root.sub("enc_body"), p, d)?;
        let pos_face = root.param("pos_face", &[config.max_frames, d], Init::Values(table.clone()))?;
        let pos_body = root.param("pos_body", &[config.max_frames, d], Init::Values(table.clone()))?;
        let enc_audio = Linear::new(&mut root.sub("enc_audio"), a, d)?;
        let pos_audio = root.param("pos_audio", &[config.max_frames, d], Init::Values(table))?;
        let null_audio = root.param("null_audio", &[a], Init::Normal(0.02))?;
        let time_in = Linear::new(&mut root.sub("time_in"), d, d)?;
        let time_out = Linear::new(&mut root.sub("time_out"), d, d)?;
        let mut face_blocks = Vec::new();
        let mut body_blocks = Vec::new();
        for i in 0..config.blocks_per_branch {
            face_blocks.push(MotionBlock::new(&mut root.sub(format!("face.{i}")), d, config.num_heads)?);
            body_blocks.push(MotionBlock::new(&mut root.sub(format!("body.{i}")), d, config.num_heads)?);
        }
        let merge_film = FilmGenerator::new(&mut root.sub("merge_film"), d, 2 * d)?;
        let out = Linear::zeros(&mut root.sub("out"), 2 * d, p)?;
        Ok(Self {
            config,
            face_mask,
            body_mask,
            enc_face,
            enc_body,
            pos_face,
            pos_body,
            enc_audio,
            pos_audio,
            null_audio,
            time_in,
            time_out,
            face_blocks,
            body_blocks,
            merge_film,
            out,
        })
    }

    fn check_inputs(&self, x_t: &Tensor, audio: &Tensor, t: &[usize]) -> Result<(usize, usize)> {
        let (b, n, cp, k) = x_t.dims4()?;
        if cp != self.config.layout.total_channels || k != 3 {
            return Err(MmgtError::shape(format!(
                "pose input {:?} does not match layout with {} keypoints",
                x_t.dims(),
                self.config.layout.total_channels
            )));
        }
        let (ba, na, da) = audio.dims3()?;
        if ba != b || na != n || da != self.config.audio_dim {
            return Err(MmgtError::shape(format!(
                "audio {:?} does not match poses {:?} / audio_dim {}",
                audio.dims(),
                x_t.dims(),
                self.config.audio_dim
            )));
        }
        if t.len() != b {
            return Err(MmgtError::shape("one timestep per batch element is required"));
        }
        if n > self.config.max_frames {
            return Err(MmgtError::shape(format!(
                "{n} frames exceed max_frames {}",
                self.config.max_frames
            )));
        }
        Ok((b, n))
    }

    /// Audio tokens `B x N x D` (the null embedding when audio is disabled).
    pub fn encode_audio(&self, audio: &Tensor) -> Result<Tensor> {
        let (b, n, da) = audio.dims3()?;
        let input = if self.config.use_audio {
            audio.clone()
        } else {
            self.null_audio.reshape((1, 1, da))?.broadcast_as((b, n, da))?.contiguous()?
        };
        let pos = self.pos_audio.narrow(0, 0, n)?.unsqueeze(0)?;
        Ok(self.enc_audio.forward(&input)?.broadcast_add(&pos)?)
    }

    pub fn time_embedding(&self, t: &[usize], like: &Tensor) -> Result<Tensor> {
        let tv: Vec<f64> = t.iter().map(|&x| x as f64).collect();
        let e = timestep_embedding(&tv, self.config.model_dim, like.dtype(), like.device())?;
        let e = self.time_out.forward(&silu(&self.time_in.forward(&e)?)?)?;
        Ok(e.unsqueeze(1)?)
    }

    pub fn branches(&self, x_t: &Tensor, audio: &Tensor, t: &[usize]) -> Result<BranchFeatures> {
        let (b, n) = self.check_inputs(x_t, audio, t)?;
        let x = x_t.reshape((b, n, self.config.pose_dim()))?;
        let xf = x.broadcast_mul(&self.face_mask)?;
        let xb = x.broadcast_mul(&self.body_mask)?;
        let mut face = self
            .enc_face
            .forward(&xf)?
            .broadcast_add(&self.pos_face.narrow(0, 0, n)?.unsqueeze(0)?)?;
        let mut body = self
            .enc_body
            .forward(&xb)?
            .broadcast_add(&self.pos_body.narrow(0, 0, n)?.unsqueeze(0)?)?;
        let fa = self.encode_audio(audio)?;
        let cond = fa.broadcast_add(&self.time_embedding(t, x_t)?)?;
        for blk in &self.face_blocks {
            face = blk.forward(&face, &fa, &cond, self.config.use_film)?;
        }
        for blk in &self.body_blocks {
            body = blk.forward(&body, &fa, &cond, self.config.use_film)?;
        }
        Ok(BranchFeatures { face, body, cond })
    }

    /// Predicted clean pose `B x N x Cp x 3` from the conditioned noisy input.
    pub fn forward(&self, x_t: &Tensor, audio: &Tensor, t: &[usize]) -> Result<Tensor> {
        let dims = x_t.dims4()?;
        let br = self.branches(x_t, audio, t)?;
        let mut merged = Tensor::cat(&[&br.face, &br.body], 2)?;
        if self.config.use_film {
            merged = self.merge_film.forward(&merged, &br.cond)?;
        }
        Ok(self.out.forward(&merged)?.reshape(dims)?)
    }

    /// [`forward`](Self::forward) with a non-finite input check.
    pub fn forward_checked(&self, x_t: &Tensor, audio: &Tensor, t: &[usize]) -> Result<Tensor> {
        ensure_finite(x_t, "pose input")?;
        ensure_finite(audio, "audio input")?;
        self.forward(x_t, audio, t)
    }

    /// 1 on modelled coordinates, `1 x 1 x Cp x 3`.
    pub fn coordinate_mask(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let cp = self.config.layout.total_channels;
        let all = crate::pose::SpatialMask { values: vec![1; cp] };
        let m = coordinate_mask(&all, self.config.layout.modelled_coords());
        Ok(Tensor::from_vec(m, (1, 1, cp, 3), device)?.to_dtype(dtype)?)
    }
}

/// Forward noising of the modelled coordinates; unmodelled ones (confidence)
/// keep their clean values.
pub fn noise_poses(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    eps: &Tensor,
    t: &[usize],
    coord_mask: &Tensor,
) -> Result<Tensor> {
    let noisy = schedule.q_sample(x0, eps, t)?;
    let keep = (coord_mask.ones_like()? - coord_mask)?;
    Ok((noisy.broadcast_mul(coord_mask)? + x0.broadcast_mul(&keep)?)?)
}

/// `R(p0)`: `B x Cp x 3` initial poses repeated over `n` frames.
pub fn repeat_over_time(p0: &Tensor, n: usize) -> Result<Tensor> {
    let (b, cp, k) = p0.dims3()?;
    Ok(p0.unsqueeze(1)?.broadcast_as((b, n, cp, k))?.contiguous()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmgaTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub loss_weights: LossWeights,
}

impl Default for SmgaTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.02,
            batch_size: 256,
            steps: 2000,
            loss_weights: LossWeights::default(),
        }
    }
}

/// One training example: clean poses, audio features and the initial pose.
#[derive(Debug, Clone)]
pub struct SmgaBatch {
    pub x0: Tensor,
    pub audio: Tensor,
    pub p0: Tensor,
}

impl SmgaBatch {
    /// Stacks clips into a batch; `p0` is each clip's first frame.
    pub fn from_clips(poses: &[&PoseSequence], audio: &[&AudioFeatureSequence], dtype: DType) -> Result<Self> {
        if poses.is_empty() {
            return Err(MmgtError::invalid("empty batch"));
        }
        if poses.len() != audio.len() {
            return Err(MmgtError::shape("pose and audio batch sizes differ"));
        }
        let (n, cp, _) = poses[0].data.dim();
        let da = audio[0].dim();
        let mut x: Vec<f32> = Vec::with_capacity(poses.len() * n * cp * 3);
        let mut a: Vec<f32> = Vec::with_capacity(poses.len() * n * da);
        let mut p: Vec<f32> = Vec::with_capacity(poses.len() * cp * 3);
        for (ps, au) in poses.iter().zip(audio) {
            if ps.data.dim() != (n, cp, 3) || au.data.dim() != (n, da) {
                return Err(MmgtError::shape("clips in a batch must share their shapes"));
            }
            x.extend(ps.data.iter());
            a.extend(au.data.iter());
            p.extend(ps.data.slice(ndarray::s![0, .., ..]).iter());
        }
        let dev = Device::Cpu;
        let b = poses.len();
        Ok(Self {
            x0: Tensor::from_vec(x, (b, n, cp, 3), &dev)?.to_dtype(dtype)?,
            audio: Tensor::from_vec(a, (b, n, da), &dev)?.to_dtype(dtype)?,
            p0: Tensor::from_vec(p, (b, cp, 3), &dev)?.to_dtype(dtype)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.x0.dims()[0]
    }
}

pub struct SmgaTrainer {
    pub model: SmgaModel,
    pub store: ParamStore,
    pub schedule: DiffusionSchedule,
    pub train: SmgaTrainConfig,
    optimizer: AdamW,
    rng: CounterRng,
    seed: u64,
    pub step: usize,
}

impl SmgaTrainer {
    pub fn new(
        config: SmgaConfig,
        schedule: DiffusionSchedule,
        train: SmgaTrainConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let model = SmgaModel::new(config, &mut store)?;
        Self::from_parts(model, store, schedule, train, seed)
    }

    pub fn from_parts(
        model: SmgaModel,
        store: ParamStore,
        schedule: DiffusionSchedule,
        train: SmgaTrainConfig,
        seed: u64,
    ) -> Result<Self> {
        train.loss_weights.validate()?;
        let optimizer = AdamW::new(
            store.vars(),
            ParamsAdamW {
                lr: train.learning_rate,
                weight_decay: train.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            store,
            schedule,
            train,
            optimizer,
            rng: CounterRng::labeled(seed, "smga-train"),
            seed,
            step: 0,
        })
    }

    /// Continues the step counter (and with it the per-step noise streams)
    /// after a restart.
    pub fn resume_at(&mut self, step: usize) {
        self.step = step;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noisy network input `x_t = x'_t + R(p0)` for the given timesteps.
    pub fn prepare_input(&self, batch: &SmgaBatch, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        let cm = self.model.coordinate_mask(batch.x0.dtype(), batch.x0.device())?;
        let noisy = noise_poses(&self.schedule, &batch.x0, eps, t, &cm)?;
        let n = batch.x0.dims()[1];
        Ok((noisy + repeat_over_time(&batch.p0, n)?)?)
    }

    pub fn train_step(&mut self, batch: &SmgaBatch) -> Result<LossRecord> {
        let b = batch.batch_size();
        if b == 0 {
            return Err(MmgtError::invalid("empty batch"));
        }
        let mut rng = self.rng.fork(self.step as u64);
        let t: Vec<usize> = (0..b)
            .map(|_| rng.below(self.schedule.train_steps() as u64) as usize)
            .collect();
        let eps = Tensor::from_vec(rng.normal_vec_f32(batch.x0.elem_count()), batch.x0.shape(), batch.x0.device())?
            .to_dtype(batch.x0.dtype())?;
        let x_t = self.prepare_input(batch, &t, &eps)?;
        let x0_hat = self.model.forward(&x_t, &batch.audio, &t)?;
        let loss = total_smga_loss(&batch.x0, &x0_hat, &self.model.config.layout, &self.train.loss_weights)?;
        self.optimizer.backward_step(&loss.total)?;
        self.step += 1;
        loss.record(self.step)
    }
}

/// Runs the reverse chain for a batch of initial poses and audio features.
///
/// The initial pose is re-added to the network input at every step and the
/// unmodelled coordinates are held at their values in `p0`. Noise is drawn per
/// batch element from `seed`, so the result for one element does not depend on
/// what else is in the batch.
pub fn sample_batch(
    model: &SmgaModel,
    schedule: &DiffusionSchedule,
    p0: &Tensor,
    audio: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let (b, cp, _) = p0.dims3()?;
    let (ba, n, _) = audio.dims3()?;
    if ba != b {
        return Err(MmgtError::shape("p0 and audio batch sizes differ"));
    }
    ensure_finite(p0, "initial pose")?;
    ensure_finite(audio, "audio input")?;
    let (dtype, dev) = (p0.dtype(), p0.device().clone());
    let cm = model.coordinate_mask(dtype, &dev)?;
    let keep = (cm.ones_like()? - &cm)?;
    let rp0 = repeat_over_time(p0, n)?;
    let fixed = rp0.broadcast_mul(&keep)?;
    let base = CounterRng::labeled(seed, "smga-sample");
    let mut rngs: Vec<CounterRng> = (0..b).map(|i| base.fork(i as u64)).collect();
    let draw = |rngs: &mut [CounterRng]| -> Result<Tensor> {
        let v: Vec<f32> = rngs.iter_mut().flat_map(|r| r.normal_vec_f32(n * cp * 3)).collect();
        Ok(Tensor::from_vec(v, (b, n, cp, 3), &dev)?.to_dtype(dtype)?)
    };
    let mut x = (draw(&mut rngs)?.broadcast_mul(&cm)? + &fixed)?;
    let sampler = schedule.sampler();
    let steps = schedule.sampling_timesteps();
    let mut x0_hat = x.clone();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied();
        let input = (&x + &rp0)?;
        let pred = model.forward(&input, audio, &vec![t; b])?;
        x0_hat = (pred.broadcast_mul(&cm)? + &fixed)?;
        let eps = schedule.eps_from_x0(&x, &x0_hat, t)?;
        let noise = if sampler.needs_noise() && t_prev.is_some() {
            Some(draw(&mut rngs)?)
        } else {
            None
        };
        let next = sampler.step(schedule, &x0_hat, &eps, t, t_prev, noise.as_ref())?;
        x = (next.broadcast_mul(&cm)? + &fixed)?;
    }
    ensure_finite(&x0_hat, "sampled poses")?;
    Ok(x0_hat)
}

/// Generated poses and the motion masks derived from them.
pub struct SmgaSample {
    pub poses: PoseSequence,
    pub masks: MotionMasks,
}

/// Samples one clip from an initial pose and its audio features.
pub fn sample(
    model: &SmgaModel,
    schedule: &DiffusionSchedule,
    p0: &Array2<f32>,
    audio: &AudioFeatureSequence,
    seed: u64,
    mask_size: (usize, usize),
) -> Result<SmgaSample> {
    let cp = model.config.layout.total_channels;
    if p0.dim() != (cp, 3) {
        return Err(MmgtError::LayoutViolation(format!(
            "initial pose has shape {:?}, layout expects ({cp}, 3)",
            p0.dim()
        )));
    }
    if audio.dim() != model.config.audio_dim {
        return Err(MmgtError::shape(format!(
            "audio feature dim {} differs from model audio_dim {}",
            audio.dim(),
            model.config.audio_dim
        )));
    }
    let n = audio.frames();
    let dtype = model.pos_face.dtype();
    let dev = Device::Cpu;
    let p0t = Tensor::from_vec(p0.iter().copied().collect::<Vec<f32>>(), (1, cp, 3), &dev)?.to_dtype(dtype)?;
    let at = Tensor::from_vec(audio.data.iter().copied().collect::<Vec<f32>>(), (1, n, audio.dim()), &dev)?
        .to_dtype(dtype)?;
    let out = sample_batch(model, schedule, &p0t, &at, seed)?;
    let poses = PoseSequence::new(tensor_to_poses(&out.squeeze(0)?)?, audio.fps)?;
    let masks = motion_masks(&poses, &model.config.layout, mask_size.0, mask_size.1)?;
    Ok(SmgaSample { poses, masks })
}

pub fn tensor_to_poses(t: &Tensor) -> Result<Array3<f32>> {
    let (n, cp, k) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((n, cp, k), v).map_err(|e| MmgtError::shape(e.to_string()))?)
}

pub fn tensor_to_batch(t: &Tensor) -> Result<Array4<f32>> {
    let (b, n, cp, k) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array4::from_shape_vec((b, n, cp, k), v).map_err(|e| MmgtError::shape(e.to_string()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    fn tiny() -> SmgaConfig {
        SmgaConfig {
            model_dim: 16,
            num_heads: 2,
            audio_dim: 4,
            blocks_per_branch: 1,
            max_frames: 8,
            ..Default::default()
        }
    }

    fn batch(b: usize, n: usize, cfg: &SmgaConfig, seed: u64) -> SmgaBatch {
        let mut r = CounterRng::new(seed, 0);
        let cp = cfg.layout.total_channels;
        let x = Tensor::from_vec(
            (0..b * n * cp * 3).map(|_| r.uniform() as f32).collect::<Vec<_>>(),
            (b, n, cp, 3),
            &Device::Cpu,
        )
        .unwrap();
        let a = Tensor::from_vec(r.normal_vec_f32(b * n * cfg.audio_dim), (b, n, cfg.audio_dim), &Device::Cpu)
            .unwrap();
        let p0 = x.narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
        SmgaBatch { x0: x, audio: a, p0 }
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = tiny();
        let mut store = ParamStore::new(1, DType::F32);
        let m = SmgaModel::new(cfg.clone(), &mut store).unwrap();
        let b = batch(2, 6, &cfg, 3);
        let y = m.forward(&b.x0, &b.audio, &[5, 900]).unwrap();
        assert_eq!(y.dims(), b.x0.dims());
    }

    #[test]
    fn rejects_wrong_layout_and_audio() {
        let cfg = tiny();
        let mut store = ParamStore::new(1, DType::F32);
        let m = SmgaModel::new(cfg.clone(), &mut store).unwrap();
        let bad = Tensor::zeros((1, 4, 10, 3), DType::F32, &Device::Cpu).unwrap();
        let a = Tensor::zeros((1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&bad, &a, &[0]), Err(MmgtError::ShapeMismatch(_))));
        let x = Tensor::zeros((1, 4, 16, 3), DType::F32, &Device::Cpu).unwrap();
        let a5 = Tensor::zeros((1, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(m.forward(&x, &a5, &[0]).is_err());
    }

    #[test]
    fn film_identity_and_broadcast() {
        let f = Tensor::new(&[[[1f32, 2.0], [3.0, 4.0]]], &Device::Cpu).unwrap();
        let g = Tensor::new(&[[[2f32, 0.5]]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[[1f32, -1.0]]], &Device::Cpu).unwrap();
        let y = film(&f, &g, &b).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(y, vec![vec![vec![3.0, 0.0], vec![7.0, 1.0]]]);
        let bad = Tensor::new(&[[[1f32, 1.0, 1.0]]], &Device::Cpu).unwrap();
        assert!(film(&f, &bad, &bad).is_err());
    }

    #[test]
    fn training_reduces_loss_on_fixed_batch() {
        let cfg = tiny();
        let sched = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let train = SmgaTrainConfig {
            learning_rate: 3e-3,
            ..Default::default()
        };
        let mut tr = SmgaTrainer::new(cfg.clone(), sched, train, 7, DType::F32).unwrap();
        let b = batch(4, 6, &cfg, 11);
        let first: f64 = (0..5).map(|_| tr.train_step(&b).unwrap().total).sum();
        for _ in 0..80 {
            tr.train_step(&b).unwrap();
        }
        let last: f64 = (0..5).map(|_| tr.train_step(&b).unwrap().total).sum();
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn sampling_is_seeded_and_keeps_confidence() {
        let cfg = tiny();
        let mut store = ParamStore::new(2, DType::F32);
        let m = SmgaModel::new(cfg.clone(), &mut store).unwrap();
        // the output projection starts at zero; give it weights so noise matters
        let mut r = CounterRng::new(5, 0);
        let w: Vec<f32> = (0..48 * 32).map(|_| 0.2 * r.normal() as f32).collect();
        store.assign("out.weight", &w).unwrap();
        let sched = DiffusionSchedule::new(ScheduleConfig {
            sampler_steps: 5,
            ..Default::default()
        })
        .unwrap();
        let b = batch(2, 5, &cfg, 4);
        let a = sample_batch(&m, &sched, &b.p0, &b.audio, 9).unwrap();
        let c = sample_batch(&m, &sched, &b.p0, &b.audio, 9).unwrap();
        let d = sample_batch(&m, &sched, &b.p0, &b.audio, 10).unwrap();
        let (a, c, d) = (tensor_to_batch(&a).unwrap(), tensor_to_batch(&c).unwrap(), tensor_to_batch(&d).unwrap());
        assert_eq!(a, c);
        assert_ne!(a, d);
        let p0 = b.p0.to_vec3::<f32>().unwrap();
        for n in 0..5 {
            for k in 0..16 {
                assert_eq!(a[[1, n, k, 2]], p0[1][k][2]);
            }
        }
        // batch composition does not change an element's sample
        let single = sample_batch(&m, &sched, &b.p0.narrow(0, 0, 1).unwrap(), &b.audio.narrow(0, 0, 1).unwrap(), 9)
            .unwrap();
        let single = tensor_to_batch(&single).unwrap();
        for (x, y) in single.iter().zip(a.slice(ndarray::s![0..1, .., .., ..]).iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
