//! Video stage: a small latent video denoiser conditioned on a reference
//! frame, a rendered pose video, per-region motion masks and audio.
//!
//! The latent space is a lossless space-to-depth rearrangement of the pixels.
//! The UNet works at three resolutions; every block runs a residual conv
//! block, spatial attention with the reference features as extra keys and
//! values, the masked hierarchical audio attention (MM-HAA), and temporal
//! attention across frames.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::formats::Video;
use crate::losses::latent_eps_loss;
use crate::maskgen::{mask_pyramid, MaskVideo, PyramidLevel};
use crate::nn::{
    clip_grad_norm, ensure_finite, silu, sinusoid_table, timestep_embedding, Attention, Conv2d, GroupNorm, Init, LayerNorm, Linear,
    ParamStore, Scope,
};
use crate::pose::AudioFeatureSequence;
use crate::rng::CounterRng;
use crate::schedule::DiffusionSchedule;

/// Number of mask regions routed by MM-HAA: face+hands, lips, background.
pub const REGIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoGenConfig {
    pub image_size: [usize; 2],
    pub latent_scale: usize,
    pub clip_len: usize,
    /// Widths at the full, half and quarter latent resolution.
    pub channels: [usize; 3],
    pub heads: usize,
    pub groups: usize,
    /// Adapter hidden width is the block width divided by this.
    pub adapter_reduction: usize,
    pub time_dim: usize,
    pub audio_dim: usize,
    /// Audio tokens per frame are the frames within this radius.
    pub audio_window: usize,
    pub num_speakers: usize,
    pub mask_sigmas: [f64; 3],
    pub temporal_pos: bool,
    pub use_audio: bool,
    pub dropout_p: f64,
}

impl Default for VideoGenConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            latent_scale: 8,
            clip_len: 12,
            channels: [32, 48, 48],
            heads: 2,
            groups: 8,
            adapter_reduction: 4,
            time_dim: 64,
            audio_dim: 8,
            audio_window: 2,
            num_speakers: 4,
            mask_sigmas: [1.0, 2.0, 4.0],
            temporal_pos: true,
            use_audio: true,
            dropout_p: 0.05,
        }
    }
}

impl VideoGenConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.latent_scale * self.latent_scale
    }

    pub fn latent_size(&self) -> (usize, usize) {
        (self.image_size[0] / self.latent_scale, self.image_size[1] / self.latent_scale)
    }

    /// Latent sizes of the three UNet levels.
    pub fn level_sizes(&self) -> [(usize, usize); 3] {
        let (h, w) = self.latent_size();
        [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
    }

    pub fn pyramid_levels(&self) -> Vec<PyramidLevel> {
        self.level_sizes()
            .iter()
            .zip(self.mask_sigmas)
            .map(|(&(height, width), sigma)| PyramidLevel { height, width, sigma })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let s = self.latent_scale;
        if s == 0 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(MmgtError::invalid(format!("image size {h}x{w} is not divisible by latent scale {s}")));
        }
        let (lh, lw) = self.latent_size();
        if lh % 4 != 0 || lw % 4 != 0 {
            return Err(MmgtError::invalid(format!(
                "latent size {lh}x{lw} must be divisible by 4 for the three UNet levels"
            )));
        }
        for &c in &self.channels {
            if c == 0 || c % self.heads != 0 || c % self.groups != 0 {
                return Err(MmgtError::invalid(format!(
                    "channel width {c} must be a positive multiple of heads {} and groups {}",
                    self.heads, self.groups
                )));
            }
        }
        if self.adapter_reduction == 0 {
            return Err(MmgtError::invalid("adapter_reduction must be positive"));
        }
        if self.clip_len == 0 || self.audio_dim == 0 || self.num_speakers == 0 || self.time_dim < 2 {
            return Err(MmgtError::invalid("clip_len, audio_dim, num_speakers and time_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(MmgtError::invalid("dropout_p must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `N x Cz x h x w` latents of a pixel clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Array4<f32>,
    pub scale: usize,
}

pub fn pixel_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Space-to-depth: channel `c * s^2 + dy * s + dx` of latent pixel `(i, j)`
/// holds colour `c` of pixel `(i * s + dy, j * s + dx)`, mapped to [-1, 1].
pub fn toy_encode(video: &Video, scale: usize) -> Result<LatentVideo> {
    let (n, h, w, _) = video.data.dim();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(MmgtError::invalid(format!("{h}x{w} frames are not divisible by scale {scale}")));
    }
    let (lh, lw) = (h / scale, w / scale);
    let data = Array4::from_shape_fn((n, 3 * scale * scale, lh, lw), |(f, ch, i, j)| {
        let (c, r) = (ch / (scale * scale), ch % (scale * scale));
        let (dy, dx) = (r / scale, r % scale);
        pixel_to_unit(video.data[[f, i * scale + dy, j * scale + dx, c]])
    });
    Ok(LatentVideo { data, scale })
}

pub fn toy_decode(latent: &LatentVideo, fps: f32) -> Result<Video> {
    let s = latent.scale;
    let (n, cz, lh, lw) = latent.data.dim();
    if s == 0 || cz != 3 * s * s {
        return Err(MmgtError::shape(format!("{cz} latent channels do not match scale {s}")));
    }
    let data = Array4::from_shape_fn((n, lh * s, lw * s, 3), |(f, y, x, c)| {
        let ch = c * s * s + (y % s) * s + (x % s);
        unit_to_pixel(latent.data[[f, ch, y / s, x / s]])
    });
    Ok(Video { data, fps })
}

/// Pixel-unshuffle on tensors: `B x C x H x W -> B x C*s^2 x H/s x W/s`,
/// channel order matching [`toy_encode`].
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % s != 0 || w % s != 0 {
        return Err(MmgtError::shape(format!("{h}x{w} not divisible by {s}")));
    }
    Ok(x.reshape((b, c, h / s, s, w / s, s))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, c * s * s, h / s, w / s))?)
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    if l != h * w {
        return Err(MmgtError::shape(format!("{l} tokens do not form a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Repeats each batch row `n` times along a new frame axis and folds it in:
/// `B x ... -> (B*n) x ...`.
fn repeat_frames(x: &Tensor, n: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let mut expanded = vec![dims[0], n];
    expanded.extend_from_slice(&dims[1..]);
    let mut folded = vec![dims[0] * n];
    folded.extend_from_slice(&dims[1..]);
    Ok(x.unsqueeze(1)?.broadcast_as(expanded)?.contiguous()?.reshape(folded)?)
}

/// Blends per batch element: `keep` where `drop` is 0, `null` where it is 1.
fn select_null(keep: &Tensor, null: &Tensor, drop: &Tensor) -> Result<Tensor> {
    let inv = (drop.ones_like()? - drop)?;
    Ok(keep.broadcast_mul(&inv)?.broadcast_add(&null.broadcast_mul(drop)?)?)
}

/// `x + conv(silu(conv(x)))`; the second conv starts at zero, so a fresh
/// adapter is the identity.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Adapter {
    pub fn new(scope: &mut Scope, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), channels, hidden, 3)?,
            conv2: Conv2d::zeros(&mut scope.sub("conv2"), hidden, channels, 3)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.conv2.forward(&silu(&self.conv1.forward(x)?)?)?)?)
    }
}

/// Sum over regions of `Adapter_r(Z_CA * M_r)`.
///
/// `z_ca` is `B x C x h x w`; `masks` is `B x 3 x h x w` in region order
/// face+hands, lips, background.
pub fn mm_haa(z_ca: &Tensor, masks: &Tensor, adapters: &[Adapter]) -> Result<Tensor> {
    let (b, _, h, w) = z_ca.dims4()?;
    let (mb, mr, mh, mw) = masks.dims4()?;
    if (mb, mh, mw) != (b, h, w) {
        return Err(MmgtError::shape(format!(
            "mask level {mh}x{mw} (batch {mb}) does not match hidden {h}x{w} (batch {b})"
        )));
    }
    if mr != adapters.len() {
        return Err(MmgtError::shape(format!("{mr} mask regions for {} adapters", adapters.len())));
    }
    let mut out: Option<Tensor> = None;
    for (r, adapter) in adapters.iter().enumerate() {
        let masked = z_ca.broadcast_mul(&masks.narrow(1, r, 1)?)?;
        let y = adapter.forward(&masked)?;
        out = Some(match out {
            None => y,
            Some(acc) => (acc + y)?,
        });
    }
    out.ok_or_else(|| MmgtError::invalid("MM-HAA needs at least one region"))
}

/// Audio cross-attention plus region adapters.
#[derive(Debug, Clone)]
pub struct MmHaa {
    pub norm: LayerNorm,
    pub cross_attn: Attention,
    pub adapters: Vec<Adapter>,
}

impl MmHaa {
    pub fn new(scope: &mut Scope, channels: usize, adapter_width: usize, audio_dim: usize, heads: usize) -> Result<Self> {
        let adapters = ["face_hands", "lips", "background"]
            .iter()
            .map(|name| Adapter::new(&mut scope.sub(format!("adapter_{name}")), channels, adapter_width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            norm: LayerNorm::new(&mut scope.sub("norm"), channels)?,
            cross_attn: Attention::new(&mut scope.sub("cross_attn"), channels, audio_dim, channels, heads)?,
            adapters,
        })
    }

    /// `Z_CA` for tokens `B x L x C` against per-frame audio tokens `B x K x Da`.
    pub fn cross_attention(&self, x: &Tensor, audio: &Tensor) -> Result<Tensor> {
        if x.dims()[0] != audio.dims()[0] {
            return Err(MmgtError::shape(format!(
                "{} frames of hidden states but {} frames of audio",
                x.dims()[0],
                audio.dims()[0]
            )));
        }
        self.cross_attn.forward(&self.norm.forward(x)?, audio)
    }

    /// The MM-HAA output for tokens on an `h x w` grid.
    pub fn forward(&self, x: &Tensor, audio: &Tensor, masks: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let z_ca = from_tokens(&self.cross_attention(x, audio)?, h, w)?;
        to_tokens(&mm_haa(&z_ca, masks, &self.adapters)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub emb: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(scope: &mut Scope, in_ch: usize, out_ch: usize, emb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut scope.sub("norm1"), in_ch, groups)?,
            conv1: Conv2d::new(&mut scope.sub("conv1"), in_ch, out_ch, 3)?,
            emb: Linear::new(&mut scope.sub("emb"), emb_dim, out_ch)?,
            norm2: GroupNorm::new(&mut scope.sub("norm2"), out_ch, groups)?,
            conv2: Conv2d::zeros(&mut scope.sub("conv2"), out_ch, out_ch, 3)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&mut scope.sub("skip"), in_ch, out_ch, 1)?)
            } else {
                None
            },
        })
    }

    /// `x`: `B x C x h x w`; `emb`: `B x E`.
    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let e = self.emb.forward(&silu(emb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Per-call inputs shared by every block at one resolution.
pub struct BlockContext<'a> {
    pub batch: usize,
    pub frames: usize,
    pub emb: &'a Tensor,
    /// Reference tokens `B x L x C` at this block's resolution.
    pub reference: &'a Tensor,
    /// Audio tokens `(B*N) x K x Da`.
    pub audio: &'a Tensor,
    /// Masks `(B*N) x 3 x h x w`.
    pub masks: &'a Tensor,
}

/// One UNet block: ResBlock, spatial attention over the frame and reference
/// tokens, MM-HAA, temporal attention.
#[derive(Debug, Clone)]
pub struct DenoiseBlock {
    pub res: ResBlock,
    pub norm_spatial: LayerNorm,
    pub spatial: Attention,
    pub haa: MmHaa,
    pub norm_temporal: LayerNorm,
    pub temporal: Attention,
    pub temporal_pos: Option<Tensor>,
}

impl DenoiseBlock {
    pub fn new(
        scope: &mut Scope,
        in_ch: usize,
        ch: usize,
        cfg: &VideoGenConfig,
    ) -> Result<Self> {
        let temporal_pos = if cfg.temporal_pos {
            Some(scope.param(
                "temporal_pos",
                &[cfg.clip_len, ch],
                Init::Values(sinusoid_table(cfg.clip_len, ch)),
            )?)
        } else {
            None
        };
        Ok(Self {
            res: ResBlock::new(&mut scope.sub("res"), in_ch, ch, cfg.time_dim, cfg.groups)?,
            norm_spatial: LayerNorm::new(&mut scope.sub("norm_spatial"), ch)?,
            spatial: Attention::new(&mut scope.sub("spatial"), ch, ch, ch, cfg.heads)?,
            haa: MmHaa::new(
                &mut scope.sub("haa"),
                ch,
                (ch / cfg.adapter_reduction).max(1),
                cfg.audio_dim,
                cfg.heads,
            )?,
            norm_temporal: LayerNorm::new(&mut scope.sub("norm_temporal"), ch)?,
            temporal: Attention::new(&mut scope.sub("temporal"), ch, ch, ch, cfg.heads)?,
            temporal_pos,
        })
    }

    /// `x`: `(B*N) x C_in x h x w` -> `(B*N) x C x h x w`.
    pub fn forward(&self, x: &Tensor, ctx: &BlockContext) -> Result<Tensor> {
        let (bn, _, h, w) = x.dims4()?;
        let (b, n) = (ctx.batch, ctx.frames);
        if bn != b * n {
            return Err(MmgtError::shape(format!("{bn} frames for batch {b} x {n}")));
        }
        let x = self.res.forward(x, ctx.emb)?;
        let c = x.dims()[1];
        let mut tok = to_tokens(&x)?;

        let hs = self.norm_spatial.forward(&tok)?;
        let reference = repeat_frames(ctx.reference, n)?;
        let kv = Tensor::cat(&[&hs, &reference], 1)?;
        tok = (tok + self.spatial.forward(&hs, &kv)?)?;

        tok = (&tok + self.haa.forward(&tok, ctx.audio, ctx.masks, h, w)?)?;

        let l = h * w;
        let seq = tok
            .reshape((b, n, l, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * l, n, c))?;
        let mut ht = self.norm_temporal.forward(&seq)?;
        if let Some(pos) = &self.temporal_pos {
            if n > pos.dims()[0] {
                return Err(MmgtError::shape(format!("{n} frames exceed clip_len {}", pos.dims()[0])));
            }
            ht = ht.broadcast_add(&pos.narrow(0, 0, n)?.unsqueeze(0)?)?;
        }
        let seq = (&seq + self.temporal.forward(&ht, &ht)?)?;
        let tok = seq
            .reshape((b, l, n, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * n, l, c))?;
        from_tokens(&tok, h, w)
    }
}

/// Conditioning for a batch of `B` clips of `N` frames.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// Reference latent `B x Cz x h x w`.
    pub reference: Tensor,
    /// Pose video in [-1, 1], `B x N x 3 x H x W`.
    pub pose: Tensor,
    /// Per UNet level, `B x N x 3 x h_i x w_i` masks in [0, 1].
    pub masks: Vec<Tensor>,
    /// Audio features `B x N x Da`.
    pub audio: Tensor,
    pub speakers: Vec<usize>,
}

/// Which modalities are replaced by their null embedding, per batch element.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dropped {
    pub reference: Vec<bool>,
    pub pose: Vec<bool>,
    pub masks: Vec<bool>,
    pub audio: Vec<bool>,
    pub speaker: Vec<bool>,
}

impl Dropped {
    pub fn none(b: usize) -> Self {
        Self {
            reference: vec![false; b],
            pose: vec![false; b],
            masks: vec![false; b],
            audio: vec![false; b],
            speaker: vec![false; b],
        }
    }

    /// Each modality dropped independently with probability `p`.
    pub fn sample(b: usize, p: f64, rng: &mut CounterRng) -> Self {
        let mut draw = || (0..b).map(|_| rng.bernoulli(p)).collect::<Vec<_>>();
        Self {
            reference: draw(),
            pose: draw(),
            masks: draw(),
            audio: draw(),
            speaker: draw(),
        }
    }
}

fn flags(v: &[bool], rank: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut shape = vec![v.len()];
    shape.extend(std::iter::repeat(1).take(rank - 1));
    let vals: Vec<f32> = v.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(vals, shape, dev)?.to_dtype(dtype)?)
}

pub struct VideoGenModel {
    pub config: VideoGenConfig,
    pub guider_in: Conv2d,
    pub guider_mid: Conv2d,
    pub guider_out: Conv2d,
    pub null_pose: Tensor,
    pub null_reference: Tensor,
    pub null_audio: Tensor,
    pub null_masks: Tensor,
    pub speaker_table: Tensor,
    pub time_in: Linear,
    pub time_out: Linear,
    pub audio_pos: Tensor,
    pub conv_in: Conv2d,
    pub ref_in: Conv2d,
    pub ref_proj: Vec<Linear>,
    pub down: Vec<DenoiseBlock>,
    pub mid: DenoiseBlock,
    pub up: Vec<DenoiseBlock>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
    /// Time-dependent gain of the linear path from `z_t` to the output. The
    /// UNet is much narrower than the latent, so without this path the noise
    /// in most latent channels could not be recovered.
    pub skip_gain: Linear,
    /// Per-pixel gate towards the noise implied by "this pixel equals the
    /// reference". Static regions can then be reproduced at full latent
    /// width instead of through the narrow UNet.
    pub anchor_gate: Conv2d,
}

/// Gate logits start here, so the anchor is mostly off at initialisation.
const ANCHOR_GATE_BIAS: f64 = -2.0;
/// The anchor is `O(1)` where the reference is right and unbounded at small
/// `t` where it is not; clamping keeps early training stable.
const ANCHOR_CLAMP: f64 = 5.0;

impl VideoGenModel {
    pub fn new(config: VideoGenConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let cz = config.latent_channels();
        let [c0, c1, c2] = config.channels;
        let s = config.latent_scale;
        let window = 2 * config.audio_window + 1;
        let mut root = store.root();
        let guider_in = Conv2d::new(&mut root.sub("pose_guider.in"), 3 * s * s, c0, 1)?;
        let guider_mid = Conv2d::new(&mut root.sub("pose_guider.mid"), c0, c0, 3)?;
        let guider_out = Conv2d::zeros(&mut root.sub("pose_guider.out"), c0, cz, 1)?;
        let null_pose = root.param("null.pose", &[cz], Init::Zeros)?;
        let null_reference = root.param("null.reference", &[cz], Init::Zeros)?;
        let null_audio = root.param("null.audio", &[config.audio_dim], Init::Normal(0.02))?;
        let null_masks = root.param("null.masks", &[REGIONS], Init::Const(0.5))?;
        let speaker_table = root.param(
            "speaker_table",
            &[config.num_speakers + 1, config.time_dim],
            Init::Normal(0.02),
        )?;
        let time_in = Linear::new(&mut root.sub("time_in"), config.time_dim, config.time_dim)?;
        let time_out = Linear::new(&mut root.sub("time_out"), config.time_dim, config.time_dim)?;
        let audio_pos = root.param("audio_pos", &[window, config.audio_dim], Init::Normal(0.02))?;
        let conv_in = Conv2d::new(&mut root.sub("conv_in"), cz, c0, 1)?;
        let ref_in = Conv2d::new(&mut root.sub("reference.in"), cz, c0, 1)?;
        let ref_proj = vec![
            Linear::new(&mut root.sub("reference.level0"), c0, c0)?,
            Linear::new(&mut root.sub("reference.level1"), c0, c1)?,
            Linear::new(&mut root.sub("reference.level2"), c0, c2)?,
        ];
        let down = vec![
            DenoiseBlock::new(&mut root.sub("down0"), c0, c0, &config)?,
            DenoiseBlock::new(&mut root.sub("down1"), c0, c1, &config)?,
        ];
        let mid = DenoiseBlock::new(&mut root.sub("mid"), c1, c2, &config)?;
        let up = vec![
            DenoiseBlock::new(&mut root.sub("up1"), c2 + c1, c1, &config)?,
            DenoiseBlock::new(&mut root.sub("up0"), c1 + c0, c0, &config)?,
        ];
        let norm_out = GroupNorm::new(&mut root.sub("norm_out"), c0, config.groups)?;
        let conv_out = Conv2d::zeros(&mut root.sub("conv_out"), c0, cz, 1)?;
        let skip_gain = Linear::zeros(&mut root.sub("skip_gain"), config.time_dim, 1)?;
        let anchor_gate = Conv2d::zeros(&mut root.sub("anchor_gate"), c0, 1, 1)?;
        Ok(Self {
            config,
            guider_in,
            guider_mid,
            guider_out,
            null_pose,
            null_reference,
            null_audio,
            null_masks,
            speaker_table,
            time_in,
            time_out,
            audio_pos,
            conv_in,
            ref_in,
            ref_proj,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            skip_gain,
            anchor_gate,
        })
    }

    /// `Z_pose`: `(B*N) x 3 x H x W -> (B*N) x Cz x h x w`.
    pub fn pose_guider(&self, pose: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = pose.dims4()?;
        if c != 3 {
            return Err(MmgtError::shape(format!("pose video must have 3 channels, got {c}")));
        }
        let x = space_to_depth(pose, self.config.latent_scale)?;
        let x = silu(&self.guider_in.forward(&x)?)?;
        let x = silu(&self.guider_mid.forward(&x)?)?;
        self.guider_out.forward(&x)
    }

    /// Per-frame audio tokens `(B*N) x K x Da` from `B x N x Da` features.
    pub fn audio_tokens(&self, audio: &Tensor) -> Result<Tensor> {
        let (b, n, da) = audio.dims3()?;
        let r = self.config.audio_window as i64;
        let idx: Vec<u32> = (0..n as i64)
            .flat_map(|f| (-r..=r).map(move |o| (f + o).clamp(0, n as i64 - 1) as u32))
            .collect();
        let k = (2 * r + 1) as usize;
        let idx = Tensor::from_vec(idx, n * k, audio.device())?;
        let tokens = audio.index_select(&idx, 1)?.reshape((b * n, k, da))?;
        Ok(tokens.broadcast_add(&self.audio_pos.unsqueeze(0)?)?)
    }

    fn check(&self, z_t: &Tensor, cond: &Conditioning, t: &[usize]) -> Result<(usize, usize)> {
        let (b, n, cz, h, w) = z_t.dims5()?;
        let (lh, lw) = self.config.latent_size();
        if cz != self.config.latent_channels() || (h, w) != (lh, lw) {
            return Err(MmgtError::shape(format!(
                "latent {:?} does not match the configured {}x{}x{}",
                z_t.dims(),
                self.config.latent_channels(),
                lh,
                lw
            )));
        }
        if t.len() != b || cond.speakers.len() != b {
            return Err(MmgtError::shape("one timestep and speaker per batch element is required"));
        }
        if cond.reference.dims() != [b, cz, h, w] {
            return Err(MmgtError::shape(format!("reference latent {:?}", cond.reference.dims())));
        }
        let [ih, iw] = self.config.image_size;
        if cond.pose.dims() != [b, n, 3, ih, iw] {
            return Err(MmgtError::shape(format!("pose video {:?}", cond.pose.dims())));
        }
        let (ab, an, ad) = cond.audio.dims3()?;
        if (ab, an, ad) != (b, n, self.config.audio_dim) {
            return Err(MmgtError::shape(format!(
                "audio {:?} does not cover {n} frames of {} features",
                cond.audio.dims(),
                self.config.audio_dim
            )));
        }
        if cond.masks.len() != 3 {
            return Err(MmgtError::shape("masks must provide three pyramid levels"));
        }
        for (m, &(mh, mw)) in cond.masks.iter().zip(self.config.level_sizes().iter()) {
            if m.dims() != [b, n, REGIONS, mh, mw] {
                return Err(MmgtError::shape(format!(
                    "mask level {:?} does not match UNet level {mh}x{mw}",
                    m.dims()
                )));
            }
        }
        if let Some(&sp) = cond.speakers.iter().find(|&&s| s >= self.config.num_speakers) {
            return Err(MmgtError::invalid(format!("speaker id {sp} out of range")));
        }
        Ok((b, n))
    }

    /// Predicted noise for `z_t` (`B x N x Cz x h x w`).
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: &[usize],
        schedule: &DiffusionSchedule,
        cond: &Conditioning,
        dropped: &Dropped,
    ) -> Result<Tensor> {
        let (b, n) = self.check(z_t, cond, t)?;
        let dims = z_t.dims().to_vec();
        let (cz, h, w) = (dims[2], dims[3], dims[4]);
        let (dtype, dev) = (z_t.dtype(), z_t.device().clone());

        // conditioning with null substitution
        let [ih, iw] = self.config.image_size;
        let z_pose = self
            .pose_guider(&cond.pose.reshape((b * n, 3, ih, iw))?)?
            .reshape((b, n, cz, h, w))?;
        let z_pose = select_null(
            &z_pose,
            &self.null_pose.reshape((1, 1, cz, 1, 1))?,
            &flags(&dropped.pose, 5, dtype, &dev)?,
        )?;
        let reference = select_null(
            &cond.reference,
            &self.null_reference.reshape((1, cz, 1, 1))?,
            &flags(&dropped.reference, 4, dtype, &dev)?,
        )?;
        let audio_drop: Vec<bool> = if self.config.use_audio {
            dropped.audio.clone()
        } else {
            vec![true; b]
        };
        let audio = select_null(
            &cond.audio,
            &self.null_audio.reshape((1, 1, self.config.audio_dim))?,
            &flags(&audio_drop, 3, dtype, &dev)?,
        )?;
        let audio_tokens = self.audio_tokens(&audio)?;
        let mask_flags = flags(&dropped.masks, 5, dtype, &dev)?;
        let null_masks = self.null_masks.reshape((1, 1, REGIONS, 1, 1))?;
        let masks = cond
            .masks
            .iter()
            .map(|m| {
                let (_, _, r, mh, mw) = m.dims5()?;
                select_null(m, &null_masks, &mask_flags)?.reshape((b * n, r, mh, mw)).map_err(Into::into)
            })
            .collect::<Result<Vec<_>>>()?;

        let speaker_idx: Vec<u32> = cond
            .speakers
            .iter()
            .zip(&dropped.speaker)
            .map(|(&s, &d)| if d { self.config.num_speakers as u32 } else { s as u32 })
            .collect();
        let speaker = self
            .speaker_table
            .index_select(&Tensor::from_vec(speaker_idx, b, &dev)?, 0)?;
        let tv: Vec<f64> = t.iter().map(|&x| x as f64).collect();
        let temb = timestep_embedding(&tv, self.config.time_dim, dtype, &dev)?;
        let hidden = silu(&self.time_in.forward(&temb)?)?;
        let gain = (self.skip_gain.forward(&hidden)? + 1.0)?;
        let temb = (self.time_out.forward(&hidden)? + speaker)?;
        let emb = repeat_frames(&temb, n)?;

        // reference features per level
        let r0 = self.ref_in.forward(&reference)?;
        let r1 = avg_pool2(&r0)?;
        let r2 = avg_pool2(&r1)?;
        let refs = [
            self.ref_proj[0].forward(&to_tokens(&r0)?)?,
            self.ref_proj[1].forward(&to_tokens(&r1)?)?,
            self.ref_proj[2].forward(&to_tokens(&r2)?)?,
        ];
        let ctx = |level: usize| BlockContext {
            batch: b,
            frames: n,
            emb: &emb,
            reference: &refs[level],
            audio: &audio_tokens,
            masks: &masks[level],
        };

        let x = (z_t + z_pose)?.reshape((b * n, cz, h, w))?;
        let x = self.conv_in.forward(&x)?;
        let s0 = self.down[0].forward(&x, &ctx(0))?;
        let s1 = self.down[1].forward(&avg_pool2(&s0)?, &ctx(1))?;
        let m = self.mid.forward(&avg_pool2(&s1)?, &ctx(2))?;
        let u1 = self.up[0].forward(&Tensor::cat(&[&upsample2(&m)?, &s1], 1)?, &ctx(1))?;
        let u0 = self.up[1].forward(&Tensor::cat(&[&upsample2(&u1)?, &s0], 1)?, &ctx(0))?;
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&u0)?)?)?;
        let skip = z_t.broadcast_mul(&gain.reshape((b, 1, 1, 1, 1))?)?;
        let net = (out.reshape(dims.clone())? + skip)?;

        // (z_t - sqrt(ab) z_ref) / sqrt(1 - ab), gated per pixel; off for
        // batch elements whose reference was dropped
        let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = t.iter().map(|&s| f(schedule.alpha_bar(s))).collect();
            Ok(Tensor::from_vec(v, (b, 1, 1, 1, 1), &dev)?.to_dtype(dtype)?)
        };
        let scale = coef(&|ab| ab.sqrt())?;
        let inv = coef(&|ab| 1.0 / (1.0 - ab).max(1e-12).sqrt())?;
        let anchor = z_t
            .broadcast_sub(&cond.reference.unsqueeze(1)?.broadcast_mul(&scale)?)?
            .broadcast_mul(&inv)?
            .clamp(-ANCHOR_CLAMP, ANCHOR_CLAMP)?;
        let keep: Vec<f64> = dropped.reference.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1, 1, 1), &dev)?.to_dtype(dtype)?;
        let gate = candle_nn::ops::sigmoid(&(self.anchor_gate.forward(&u0)? + ANCHOR_GATE_BIAS)?)?
            .reshape((b, n, 1, h, w))?
            .broadcast_mul(&keep)?;
        Ok((&net + (anchor - &net)?.broadcast_mul(&gate)?)?)
    }
}

/// Everything the video stage needs for one clip, on the host.
#[derive(Debug, Clone)]
pub struct VideoExample {
    pub target: LatentVideo,
    pub reference: Array3<f32>,
    pub pose: Array4<f32>,
    /// Per level, `N x 3 x h_i x w_i`.
    pub masks: Vec<Array4<f32>>,
    pub audio: AudioFeatureSequence,
    pub speaker: usize,
}

/// Pixel video `N x H x W x 3` to `N x 3 x H x W` in [-1, 1].
pub fn video_to_chw(video: &Video) -> Array4<f32> {
    let (n, h, w, _) = video.data.dim();
    Array4::from_shape_fn((n, 3, h, w), |(f, c, y, x)| pixel_to_unit(video.data[[f, y, x, c]]))
}

/// Region pyramids stacked per level: `N x 3 x h_i x w_i`, regions ordered
/// face+hands, lips, background.
pub fn mask_levels(
    face_hands: &MaskVideo,
    lips: &MaskVideo,
    background: &MaskVideo,
    cfg: &VideoGenConfig,
) -> Result<Vec<Array4<f32>>> {
    let levels = cfg.pyramid_levels();
    let pyramids = [
        mask_pyramid(face_hands, &levels)?,
        mask_pyramid(lips, &levels)?,
        mask_pyramid(background, &levels)?,
    ];
    let n = face_hands.frames();
    Ok((0..levels.len())
        .map(|i| {
            let (_, h, w) = pyramids[0].levels[i].dim();
            Array4::from_shape_fn((n, REGIONS, h, w), |(f, r, y, x)| pyramids[r].levels[i][[f, y, x]])
        })
        .collect())
}

impl VideoExample {
    /// Builds an example from pixel frames, the pose video and masks; the
    /// first frame is the reference.
    pub fn new(
        frames: &Video,
        pose_video: &Video,
        masks: Vec<Array4<f32>>,
        audio: &AudioFeatureSequence,
        speaker: usize,
        cfg: &VideoGenConfig,
    ) -> Result<Self> {
        let [h, w] = cfg.image_size;
        if frames.size() != (h, w) || pose_video.size() != (h, w) {
            return Err(MmgtError::shape(format!(
                "frames {:?} / pose video {:?} do not match image size {h}x{w}",
                frames.size(),
                pose_video.size()
            )));
        }
        let n = frames.frames();
        if pose_video.frames() != n || audio.frames() != n || masks.iter().any(|m| m.dim().0 != n) {
            return Err(MmgtError::shape("all conditioning streams must have the clip's frame count"));
        }
        let target = toy_encode(frames, cfg.latent_scale)?;
        let reference = target.data.slice(s![0, .., .., ..]).to_owned();
        Ok(Self {
            target,
            reference,
            pose: video_to_chw(pose_video),
            masks,
            audio: audio.clone(),
            speaker,
        })
    }

    /// Inference-time example: only the reference image is known, so the
    /// target is the reference repeated (sampling reads only its length).
    pub fn from_reference(
        reference: &Video,
        pose_video: &Video,
        masks: Vec<Array4<f32>>,
        audio: &AudioFeatureSequence,
        speaker: usize,
        cfg: &VideoGenConfig,
    ) -> Result<Self> {
        if reference.frames() == 0 {
            return Err(MmgtError::invalid("reference video has no frames"));
        }
        let (_, h, w, c) = reference.data.dim();
        let first = reference.data.slice(s![0..1, .., .., ..]);
        let n = pose_video.frames();
        let repeated = Video {
            data: first.broadcast((n, h, w, c)).expect("unit axis broadcasts").to_owned(),
            fps: reference.fps,
        };
        Self::new(&repeated, pose_video, masks, audio, speaker, cfg)
    }
}

fn stack<D: ndarray::Dimension>(arrays: &[&ndarray::Array<f32, D>], dtype: DType) -> Result<Tensor> {
    let first = arrays.first().ok_or_else(|| MmgtError::invalid("empty batch"))?;
    let mut shape = vec![arrays.len()];
    shape.extend_from_slice(first.shape());
    let mut data: Vec<f32> = Vec::with_capacity(arrays.len() * first.len());
    for a in arrays {
        if a.shape() != first.shape() {
            return Err(MmgtError::shape("examples in a batch must share their shapes"));
        }
        data.extend(a.iter());
    }
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Batched targets and conditioning.
pub struct VideoBatch {
    pub target: Tensor,
    pub cond: Conditioning,
}

impl VideoBatch {
    pub fn new(examples: &[&VideoExample], dtype: DType) -> Result<Self> {
        let target = stack(&examples.iter().map(|e| &e.target.data).collect::<Vec<_>>(), dtype)?;
        let cond = conditioning(examples, dtype)?;
        Ok(Self { target, cond })
    }
}

pub fn conditioning(examples: &[&VideoExample], dtype: DType) -> Result<Conditioning> {
    let levels = examples.first().map_or(0, |e| e.masks.len());
    Ok(Conditioning {
        reference: stack(&examples.iter().map(|e| &e.reference).collect::<Vec<_>>(), dtype)?,
        pose: stack(&examples.iter().map(|e| &e.pose).collect::<Vec<_>>(), dtype)?,
        masks: (0..levels)
            .map(|i| stack(&examples.iter().map(|e| &e.masks[i]).collect::<Vec<_>>(), dtype))
            .collect::<Result<Vec<_>>>()?,
        audio: stack(&examples.iter().map(|e| &e.audio.data).collect::<Vec<_>>(), dtype)?,
        speakers: examples.iter().map(|e| e.speaker).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for VideoTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 0.0,
            batch_size: 2,
            steps: 3000,
            grad_clip: 1.0,
        }
    }
}

pub struct VideoTrainer {
    pub model: VideoGenModel,
    pub store: ParamStore,
    pub schedule: DiffusionSchedule,
    pub train: VideoTrainConfig,
    optimizer: AdamW,
    rng: CounterRng,
    seed: u64,
    pub step: usize,
}

impl VideoTrainer {
    pub fn new(
        config: VideoGenConfig,
        schedule: DiffusionSchedule,
        train: VideoTrainConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let model = VideoGenModel::new(config, &mut store)?;
        Self::from_parts(model, store, schedule, train, seed)
    }

    pub fn from_parts(
        model: VideoGenModel,
        store: ParamStore,
        schedule: DiffusionSchedule,
        train: VideoTrainConfig,
        seed: u64,
    ) -> Result<Self> {
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
            rng: CounterRng::labeled(seed, "video-train"),
            seed,
            step: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn resume_at(&mut self, step: usize) {
        self.step = step;
    }

    /// One epsilon-prediction update; returns the loss before the update.
    pub fn train_step(&mut self, batch: &VideoBatch) -> Result<f64> {
        let b = batch.target.dims()[0];
        if b == 0 {
            return Err(MmgtError::invalid("empty batch"));
        }
        let mut rng = self.rng.fork(self.step as u64);
        let t: Vec<usize> = (0..b)
            .map(|_| rng.below(self.schedule.train_steps() as u64) as usize)
            .collect();
        let eps = Tensor::from_vec(
            rng.normal_vec_f32(batch.target.elem_count()),
            batch.target.shape(),
            batch.target.device(),
        )?
        .to_dtype(batch.target.dtype())?;
        let z_t = self.schedule.q_sample(&batch.target, &eps, &t)?;
        let dropped = Dropped::sample(b, self.model.config.dropout_p, &mut rng);
        let pred = self.model.forward(&z_t, &t, &self.schedule, &batch.cond, &dropped)?;
        let loss = latent_eps_loss(&eps, &pred)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(MmgtError::NonFinite("video loss"));
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&mut grads, &self.store.vars(), self.train.grad_clip)?;
        self.optimizer.step(&grads)?;
        self.step += 1;
        Ok(value)
    }
}

/// Reverse chain in latent space. Frame 0 is pinned to the forward-noised
/// reference latent at every step; no modality is dropped. Returns the clean
/// latent estimate `B x N x Cz x h x w`.
pub fn sample_latents(
    model: &VideoGenModel,
    schedule: &DiffusionSchedule,
    cond: &Conditioning,
    frames: usize,
    seed: u64,
) -> Result<Tensor> {
    let (b, cz, h, w) = cond.reference.dims4()?;
    let (dtype, dev) = (cond.reference.dtype(), cond.reference.device().clone());
    let base = CounterRng::labeled(seed, "video-sample");
    let mut rngs: Vec<CounterRng> = (0..b).map(|i| base.fork(i as u64)).collect();
    let per = frames * cz * h * w;
    let draw = |rngs: &mut [CounterRng]| -> Result<Tensor> {
        let v: Vec<f32> = rngs.iter_mut().flat_map(|r| r.normal_vec_f32(per)).collect();
        Ok(Tensor::from_vec(v, (b, frames, cz, h, w), &dev)?.to_dtype(dtype)?)
    };
    let mut z = draw(&mut rngs)?;
    let ref_noise = z.narrow(1, 0, 1)?;
    let reference = cond.reference.unsqueeze(1)?;
    let rest = frames - 1;
    let pin = |z: &Tensor, t: usize| -> Result<Tensor> {
        let ab = schedule.alpha_bar(t);
        let f0 = ((&reference * ab.sqrt())? + (&ref_noise * (1.0 - ab).sqrt())?)?;
        if rest == 0 {
            Ok(f0)
        } else {
            Ok(Tensor::cat(&[&f0, &z.narrow(1, 1, rest)?], 1)?)
        }
    };
    let dropped = Dropped::none(b);
    let sampler = schedule.sampler();
    let steps = schedule.sampling_timesteps();
    let mut x0 = z.clone();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied();
        z = pin(&z, t)?;
        let eps = model.forward(&z, &vec![t; b], schedule, cond, &dropped)?;
        x0 = schedule.x0_from_eps(&z, &eps, t)?.clamp(-1.0, 1.0)?;
        let eps = schedule.eps_from_x0(&z, &x0, t)?;
        let noise = if sampler.needs_noise() && t_prev.is_some() {
            Some(draw(&mut rngs)?)
        } else {
            None
        };
        z = sampler.step(schedule, &x0, &eps, t, t_prev, noise.as_ref())?;
    }
    ensure_finite(&x0, "sampled latents")?;
    Ok(x0)
}

/// Samples one clip and decodes it; frame 0 is the reference image itself.
pub fn sample_video(
    model: &VideoGenModel,
    schedule: &DiffusionSchedule,
    reference: &Video,
    example: &VideoExample,
    seed: u64,
) -> Result<Video> {
    let dtype = model.null_pose.dtype();
    let cond = conditioning(&[example], dtype)?;
    let n = example.target.data.dim().0;
    let latents = sample_latents(model, schedule, &cond, n, seed)?;
    let (_, _, cz, h, w) = latents.dims5()?;
    let v = latents.squeeze(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let data = Array4::from_shape_vec((n, cz, h, w), v).map_err(|e| MmgtError::shape(e.to_string()))?;
    let mut video = toy_decode(
        &LatentVideo {
            data,
            scale: model.config.latent_scale,
        },
        reference.fps,
    )?;
    if reference.size() != video.size() {
        return Err(MmgtError::shape("reference image size differs from the model's image size"));
    }
    video
        .data
        .slice_mut(s![0, .., .., ..])
        .assign(&reference.data.slice(s![0, .., .., ..]));
    Ok(video)
}

/// Per-batch mean over frames and pixels, for reporting.
pub fn mean_abs(x: &Tensor) -> Result<f64> {
    Ok(x.abs()?.flatten_all()?.mean(D::Minus1)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn tiny() -> VideoGenConfig {
        VideoGenConfig {
            image_size: [16, 16],
            latent_scale: 4,
            clip_len: 3,
            channels: [8, 8, 8],
            heads: 2,
            groups: 2,
            time_dim: 8,
            audio_dim: 3,
            audio_window: 1,
            num_speakers: 2,
            ..Default::default()
        }
    }

    fn random_video(n: usize, h: usize, w: usize, seed: u64) -> Video {
        let mut r = CounterRng::new(seed, 0);
        Video {
            data: Array4::from_shape_fn((n, h, w, 3), |_| r.below(256) as u8),
            fps: 25.0,
        }
    }

    #[test]
    fn toy_codec_is_lossless_and_energy_preserving() {
        let v = random_video(2, 16, 24, 1);
        let z = toy_encode(&v, 8).unwrap();
        assert_eq!(z.data.dim(), (2, 192, 2, 3));
        assert_eq!(toy_decode(&z, 25.0).unwrap(), v);
        // the codec permutes values, so sums taken in sorted order agree exactly
        let energy = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>()
        };
        let e_pix = energy(v.data.iter().map(|&p| (pixel_to_unit(p) as f64).powi(2)).collect());
        let e_lat = energy(z.data.iter().map(|&p| (p as f64).powi(2)).collect());
        assert_eq!(e_pix, e_lat);
        assert!(toy_encode(&random_video(1, 10, 16, 2), 8).is_err());
    }

    #[test]
    fn tensor_space_to_depth_matches_codec() {
        let v = random_video(2, 16, 16, 3);
        let chw = video_to_chw(&v);
        let t = Tensor::from_vec(chw.iter().copied().collect::<Vec<_>>(), (2, 3, 16, 16), &Device::Cpu).unwrap();
        let s = space_to_depth(&t, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let z = toy_encode(&v, 4).unwrap();
        assert_eq!(s, z.data.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn fresh_pose_guider_outputs_zero() {
        let mut store = ParamStore::new(0, DType::F32);
        let m = VideoGenModel::new(tiny(), &mut store).unwrap();
        let pose = Tensor::randn(0f32, 1.0, (3, 3, 16, 16), &Device::Cpu).unwrap();
        let z = m.pose_guider(&pose).unwrap();
        assert_eq!(z.dims(), &[3, 48, 4, 4]);
        assert_eq!(z.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn single_audio_token_broadcasts_value() {
        let mut store = ParamStore::new(0, DType::F64);
        let haa = MmHaa::new(&mut store.root().sub("h"), 4, 2, 3, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 4), &Device::Cpu).unwrap();
        let a = Tensor::randn(0f64, 1.0, (2, 1, 3), &Device::Cpu).unwrap();
        let y = haa.cross_attn.attend(&haa.norm.forward(&x).unwrap(), &a).unwrap();
        let v = haa.cross_attn.v.forward(&a).unwrap();
        for i in 0..5 {
            let row = y.narrow(1, i, 1).unwrap();
            let diff = (row - &v).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12);
        }
        let w = haa.cross_attn.weights(&x, &Tensor::randn(0f64, 1.0, (2, 4, 3), &Device::Cpu).unwrap()).unwrap();
        let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn mask_resolution_mismatch_is_rejected() {
        let mut store = ParamStore::new(0, DType::F32);
        let haa = MmHaa::new(&mut store.root().sub("h"), 4, 2, 3, 2).unwrap();
        let z = Tensor::zeros((2, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let m = Tensor::zeros((2, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(mm_haa(&z, &m, &haa.adapters), Err(MmgtError::ShapeMismatch(_))));
    }

    #[test]
    fn dropout_rate_is_respected() {
        let mut r = CounterRng::new(3, 0);
        let d = Dropped::sample(20_000, 0.05, &mut r);
        let rate = d.audio.iter().filter(|&&x| x).count() as f64 / 20_000.0;
        assert!((rate - 0.05).abs() < 0.006, "{rate}");
        assert!(Dropped::none(4).pose.iter().all(|&x| !x));
    }
}
