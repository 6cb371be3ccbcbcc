//! Synthetic corpus with a known audio-to-pose coupling, plus clip storage.
//!
//! Coupling used by the generator (toy 16-keypoint skeleton):
//! * audio features are smoothed noise squashed into (0, 1);
//! * lip opening (lower-lip y minus upper-lip y) is `gap + lip_gain * a0`;
//! * both hands rise by `hand_gain * lowpass(a1)` and spread sideways by half
//!   that, elbows by half again;
//! * the head and the other body keypoints follow slow mean-reverting walks.

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::formats::{
    read_audio_bin, read_json, read_poses_bin, read_video_dir, write_audio_bin, write_json, write_poses_bin,
    write_video_dir, Video,
};
use crate::pose::{AudioFeatureSequence, KeypointLayout, PoseSequence};
use crate::render::{render_appearance_video, render_pose_video};
use crate::rng::CounterRng;

pub const CLIP_FORMAT_VERSION: u32 = 1;
pub const UPPER_LIP: usize = 3;
pub const LOWER_LIP: usize = 4;
const LIP_GAP: f64 = 0.012;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub keypoints: usize,
    pub audio_dim: usize,
    pub fps: f32,
    pub image_size: [usize; 2],
    pub num_speakers: usize,
    pub seed: u64,
    pub lip_gain: f64,
    pub hand_gain: f64,
    /// Whether to draw the pose and appearance videos (stage one only needs
    /// poses and audio).
    pub render: bool,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            num_clips: 512,
            frames_per_clip: 24,
            keypoints: 16,
            audio_dim: 8,
            fps: 25.0,
            image_size: [64, 64],
            num_speakers: 4,
            seed: 0,
            lip_gain: 0.04,
            hand_gain: 0.15,
            render: true,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clips == 0 || self.frames_per_clip == 0 || self.num_speakers == 0 {
            return Err(MmgtError::invalid("num_clips, frames_per_clip and num_speakers must be positive"));
        }
        if self.keypoints != 16 {
            return Err(MmgtError::LayoutViolation(format!(
                "the synthetic generator drives the 16-keypoint toy skeleton, got {}",
                self.keypoints
            )));
        }
        if self.audio_dim < 2 {
            return Err(MmgtError::invalid("audio_dim must be at least 2 (lip and hand drivers)"));
        }
        if !(self.fps > 0.0) || self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(MmgtError::invalid("fps and image_size must be positive"));
        }
        if !(self.lip_gain >= 0.0 && self.hand_gain >= 0.0) {
            return Err(MmgtError::invalid("coupling gains must be non-negative"));
        }
        Ok(())
    }

    pub fn layout(&self) -> KeypointLayout {
        KeypointLayout::toy16()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: usize,
    pub speaker_id: usize,
    pub poses: PoseSequence,
    pub audio: AudioFeatureSequence,
    pub frames: Option<Video>,
    pub pose_frames: Option<Video>,
}

const CANONICAL: [(f64, f64); 16] = [
    (0.50, 0.28),
    (0.46, 0.25),
    (0.54, 0.25),
    (0.50, 0.335),
    (0.50, 0.347),
    (0.47, 0.341),
    (0.53, 0.341),
    (0.50, 0.45),
    (0.37, 0.49),
    (0.63, 0.49),
    (0.31, 0.63),
    (0.69, 0.63),
    (0.35, 0.76),
    (0.65, 0.76),
    (0.36, 0.81),
    (0.64, 0.81),
];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exponentially smoothed noise, rescaled to unit variance and squashed.
fn envelope(rng: &mut CounterRng, n: usize, alpha: f64) -> Vec<f64> {
    let warmup = 20;
    let mut s = 0.0;
    let mut out = Vec::with_capacity(n);
    // stationary variance of the EMA for unit-variance input
    let std = (alpha / (2.0 - alpha)).sqrt();
    for i in 0..n + warmup {
        s = (1.0 - alpha) * s + alpha * rng.normal();
        if i >= warmup {
            out.push(sigmoid(2.0 * s / std));
        }
    }
    out
}

fn lowpass(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut s = x.first().copied().unwrap_or(0.0);
    x.iter()
        .map(|&v| {
            s = (1.0 - alpha) * s + alpha * v;
            s
        })
        .collect()
}

/// Mean-reverting random walk around 0.
fn walk(rng: &mut CounterRng, n: usize, step: f64, revert: f64) -> Vec<f64> {
    let mut s = 0.0;
    (0..n)
        .map(|_| {
            s = (1.0 - revert) * s + step * rng.normal();
            s
        })
        .collect()
}

/// Generates clip `id`; each clip has its own RNG stream, so clips can be
/// produced independently and in any order.
pub fn generate_clip(cfg: &SyntheticCorpusConfig, id: usize) -> Result<Clip> {
    cfg.validate()?;
    let n = cfg.frames_per_clip;
    let rng = CounterRng::labeled(cfg.seed, "corpus").fork(id as u64);
    let mut audio_rng = rng.fork(0);
    let mut pose_rng = rng.fork(1);
    let speaker = id % cfg.num_speakers;

    let mut audio = Array2::<f32>::zeros((n, cfg.audio_dim));
    let mut envs = Vec::with_capacity(cfg.audio_dim);
    for c in 0..cfg.audio_dim {
        let alpha = if c == 0 { 0.45 } else { 0.3 };
        let e = envelope(&mut audio_rng, n, alpha);
        for (i, v) in e.iter().enumerate() {
            audio[[i, c]] = *v as f32;
        }
        envs.push(e);
    }
    let hand_drive = lowpass(&envs[1], 0.35);

    let mut speaker_rng = CounterRng::labeled(speaker as u64, "speaker-shape");
    let body_scale = 0.9 + 0.2 * speaker_rng.uniform();
    let shift_x = 0.04 * (pose_rng.uniform() - 0.5);
    let shift_y = 0.04 * (pose_rng.uniform() - 0.5);
    let head_x = walk(&mut pose_rng, n, 0.003, 0.05);
    let head_y = walk(&mut pose_rng, n, 0.002, 0.05);
    let jitter: Vec<(Vec<f64>, Vec<f64>)> = (0..16)
        .map(|_| (walk(&mut pose_rng, n, 0.002, 0.1), walk(&mut pose_rng, n, 0.002, 0.1)))
        .collect();
    let conf: Vec<f64> = (0..16).map(|_| 0.8 + 0.2 * pose_rng.uniform()).collect();

    let mut data = Array3::<f32>::zeros((n, 16, 3));
    for t in 0..n {
        let open = cfg.lip_gain * envs[0][t];
        let raise = cfg.hand_gain * hand_drive[t];
        for (k, &(bx, by)) in CANONICAL.iter().enumerate() {
            let mut x = 0.5 + (bx - 0.5) * body_scale + shift_x;
            let mut y = 0.45 + (by - 0.45) * body_scale + shift_y;
            if k < 7 {
                x += head_x[t];
                y += head_y[t];
            } else {
                x += jitter[k].0[t];
                y += jitter[k].1[t];
            }
            if k == UPPER_LIP || k == LOWER_LIP {
                let centre = 0.5 * (CANONICAL[UPPER_LIP].1 + CANONICAL[LOWER_LIP].1);
                let half = 0.5 * (LIP_GAP + open);
                y = 0.45 + (centre - 0.45) * body_scale + shift_y + head_y[t];
                y += if k == UPPER_LIP { -half } else { half };
            }
            let side = if k % 2 == 0 { -1.0 } else { 1.0 };
            match k {
                12..=15 => {
                    y -= raise;
                    x += side * 0.5 * raise;
                }
                10 | 11 => {
                    y -= 0.5 * raise;
                    x += side * 0.25 * raise;
                }
                _ => {}
            }
            data[[t, k, 0]] = x.clamp(0.01, 0.99) as f32;
            data[[t, k, 1]] = y.clamp(0.01, 0.99) as f32;
            data[[t, k, 2]] = conf[k] as f32;
        }
    }
    let poses = PoseSequence::new(data, cfg.fps)?;
    let audio = AudioFeatureSequence::new(audio, cfg.fps)?;
    let layout = cfg.layout();
    let [h, w] = cfg.image_size;
    let (frames, pose_frames) = if cfg.render {
        (
            Some(render_appearance_video(&poses, &layout, speaker, h, w)?),
            Some(render_pose_video(&poses, &layout, h, w)?),
        )
    } else {
        (None, None)
    };
    Ok(Clip {
        id,
        speaker_id: speaker,
        poses,
        audio,
        frames,
        pose_frames,
    })
}

pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<Clip>> {
    cfg.validate()?;
    (0..cfg.num_clips).into_par_iter().map(|i| generate_clip(cfg, i)).collect()
}

/// Lower-lip y minus upper-lip y per frame.
pub fn lip_opening(poses: &PoseSequence) -> Vec<f64> {
    (0..poses.frames())
        .map(|t| (poses.data[[t, LOWER_LIP, 1]] - poses.data[[t, UPPER_LIP, 1]]) as f64)
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub version: u32,
    pub id: usize,
    pub speaker_id: usize,
    pub fps: f32,
    pub frames: usize,
    pub keypoints: usize,
    pub audio_dim: usize,
    pub has_frames: bool,
    pub has_pose_frames: bool,
}

pub fn clip_dir_name(id: usize) -> String {
    format!("clip_{id:06}")
}

pub fn save_clip(dir: &Path, clip: &Clip) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_poses_bin(&dir.join("poses.bin"), &clip.poses)?;
    write_audio_bin(&dir.join("audio.bin"), &clip.audio)?;
    if let Some(v) = &clip.frames {
        write_video_dir(&dir.join("frames"), v)?;
    }
    if let Some(v) = &clip.pose_frames {
        write_video_dir(&dir.join("pose_frames"), v)?;
    }
    // meta.json last: its presence marks a complete clip
    write_json(
        &dir.join("meta.json"),
        &ClipMeta {
            version: CLIP_FORMAT_VERSION,
            id: clip.id,
            speaker_id: clip.speaker_id,
            fps: clip.poses.fps,
            frames: clip.poses.frames(),
            keypoints: clip.poses.channels(),
            audio_dim: clip.audio.dim(),
            has_frames: clip.frames.is_some(),
            has_pose_frames: clip.pose_frames.is_some(),
        },
    )
}

pub fn load_clip(dir: &Path) -> Result<Clip> {
    let meta_path = dir.join("meta.json");
    let meta: ClipMeta = read_json(&meta_path)?;
    if meta.version != CLIP_FORMAT_VERSION {
        return Err(MmgtError::VersionMismatch {
            found: meta.version,
            expected: CLIP_FORMAT_VERSION,
        });
    }
    let bad = |what: &str| MmgtError::Integrity {
        path: dir.display().to_string(),
        reason: format!("{what} disagrees with meta.json"),
    };
    let poses = read_poses_bin(&dir.join("poses.bin"), meta.fps)?;
    if poses.frames() != meta.frames || poses.channels() != meta.keypoints {
        return Err(bad("poses.bin"));
    }
    let audio = read_audio_bin(&dir.join("audio.bin"), meta.fps)?;
    if audio.frames() != meta.frames || audio.dim() != meta.audio_dim {
        return Err(bad("audio.bin"));
    }
    let load_video = |name: &str, present: bool| -> Result<Option<Video>> {
        if !present {
            return Ok(None);
        }
        let v = read_video_dir(&dir.join(name))?;
        if v.frames() != meta.frames {
            return Err(bad(name));
        }
        Ok(Some(v))
    };
    let frames = load_video("frames", meta.has_frames)?;
    let pose_frames = load_video("pose_frames", meta.has_pose_frames)?;
    Ok(Clip {
        id: meta.id,
        speaker_id: meta.speaker_id,
        poses,
        audio,
        frames,
        pose_frames,
    })
}

pub fn save_corpus(root: &Path, clips: &[Clip], cfg: &SyntheticCorpusConfig) -> Result<()> {
    std::fs::create_dir_all(root)?;
    clips
        .par_iter()
        .try_for_each(|c| save_clip(&root.join(clip_dir_name(c.id)), c))?;
    write_json(&root.join("corpus.json"), cfg)
}

/// Loads every `clip_*` directory under `root`, in id order.
pub fn load_corpus(root: &Path) -> Result<Vec<Clip>> {
    let dirs = crate::formats::list_prefixed(root, "clip_")?;
    if dirs.is_empty() {
        return Err(MmgtError::InsufficientData(format!("no clips under {}", root.display())));
    }
    dirs.par_iter().map(|d| load_clip(d)).collect()
}
