//! Training, sampling and scoring routines shared by the subcommands.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use mmgt::ablation::Ablation;
use mmgt::checkpoint::Checkpoint;
use mmgt::data::{generate_corpus, lip_opening, load_corpus, pearson, save_corpus, Clip, SyntheticCorpusConfig};
use mmgt::formats::{read_json, write_atomic, write_png, Video};
use mmgt::losses::LossRecord;
use mmgt::maskgen::motion_masks;
use mmgt::metrics::{diversity, frechet_distance, train_pose_autoencoder, FeatureStats, PoseAutoencoder};
use mmgt::nn::ParamStore;
use mmgt::pose::{AudioFeatureSequence, ClipWindow, KeypointLayout, PoseSequence};
use mmgt::rng::{stream_id, CounterRng};
use mmgt::schedule::{DiffusionSchedule, ScheduleConfig};
use mmgt::smga::{sample_batch, tensor_to_batch, SmgaBatch, SmgaConfig, SmgaModel, SmgaTrainConfig, SmgaTrainer};
use mmgt::videogen::{mask_levels, VideoBatch, VideoExample, VideoGenConfig, VideoGenModel, VideoTrainConfig, VideoTrainer};
use mmgt::{MmgtError, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::plot;

pub const SMGA_KIND: &str = "smga";
pub const VIDEO_KIND: &str = "videogen";
/// Clips per Stage I sampling batch.
const SAMPLE_CHUNK: usize = 64;

/// Corpus location: a content-keyed directory under `MMGT_CACHE` when set,
/// otherwise `<out>/corpus`.
pub fn corpus_dir(corpus: &SyntheticCorpusConfig, out: &Path) -> Result<PathBuf> {
    match std::env::var_os("MMGT_CACHE") {
        Some(cache) if !cache.is_empty() => {
            let key = stream_id(&serde_json::to_string(corpus)?);
            Ok(PathBuf::from(cache).join(format!("corpus-{key:016x}")))
        }
        _ => Ok(out.join("corpus")),
    }
}

/// Loads the corpus if a complete copy with the same config exists,
/// otherwise generates and stores it.
pub fn ensure_corpus(corpus: &SyntheticCorpusConfig, out: &Path) -> Result<(Vec<Clip>, PathBuf)> {
    let dir = corpus_dir(corpus, out)?;
    let marker = dir.join("corpus.json");
    if marker.exists() {
        let stored: SyntheticCorpusConfig = read_json(&marker)?;
        if &stored == corpus {
            log::info!("reusing corpus at {}", dir.display());
            return Ok((load_corpus(&dir)?, dir));
        }
        log::info!("corpus at {} has a different config; regenerating", dir.display());
        std::fs::remove_file(&marker)?;
    }
    log::info!("generating {} clips into {}", corpus.num_clips, dir.display());
    let clips = generate_corpus(corpus)?;
    save_corpus(&dir, &clips, corpus)?;
    Ok((clips, dir))
}

/// Training clips and held-out clips.
pub fn split(clips: &[Clip], held_out: usize) -> (Vec<&Clip>, Vec<&Clip>) {
    let cut = clips.len().saturating_sub(held_out);
    (clips[..cut].iter().collect(), clips[cut..].iter().collect())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MmgtError::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MmgtError::InvalidArgument(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MmgtError::Integrity {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| MmgtError::Integrity {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
}

fn smga_header_config(model: &SmgaConfig, train: &SmgaTrainConfig) -> serde_json::Value {
    json!({ "model": model, "train": train })
}

fn model_config<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint) -> Result<T> {
    let v = ckpt
        .header
        .config
        .get("model")
        .cloned()
        .ok_or_else(|| MmgtError::InvalidArgument("checkpoint header has no model config".into()))?;
    Ok(serde_json::from_value(v)?)
}

/// Restores a saved trainer if `resume` is set and the checkpoint matches the
/// requested configuration; returns the completed step count.
fn try_resume(path: &Path, kind: &str, header: &serde_json::Value, schedule: &ScheduleConfig, seed: u64, store: &ParamStore) -> Result<Option<usize>> {
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(kind)?;
    if &ckpt.header.config != header || &ckpt.header.schedule != schedule || ckpt.header.seed != seed {
        return Err(MmgtError::InvalidArgument(format!(
            "{} was written with a different config or seed; refusing to resume",
            path.display()
        )));
    }
    ckpt.restore_into(store)?;
    Ok(Some(ckpt.header.step))
}

pub struct SmgaRun {
    pub trainer: SmgaTrainer,
    pub history: Vec<LossRecord>,
}

/// Trains Stage I, writing `smga.ckpt`, `smga_loss.csv` and `smga_loss.png`
/// under `dir` every `every` steps and at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_smga(
    model: &SmgaConfig,
    train: &SmgaTrainConfig,
    schedule: &ScheduleConfig,
    seed: u64,
    clips: &[&Clip],
    dir: &Path,
    resume: bool,
    every: usize,
) -> Result<SmgaRun> {
    if clips.is_empty() {
        return Err(MmgtError::InsufficientData("no training clips".into()));
    }
    std::fs::create_dir_all(dir)?;
    let sched = DiffusionSchedule::new(schedule.clone())?;
    let mut trainer = SmgaTrainer::new(model.clone(), sched, train.clone(), seed, DType::F32)?;
    let header = smga_header_config(model, train);
    let ckpt_path = dir.join("smga.ckpt");
    let csv_path = dir.join("smga_loss.csv");
    let mut history: Vec<LossRecord> = Vec::new();
    if resume {
        if let Some(step) = try_resume(&ckpt_path, SMGA_KIND, &header, schedule, seed, &trainer.store)? {
            trainer.resume_at(step);
            if csv_path.exists() {
                history = read_csv::<LossRecord>(&csv_path)?.into_iter().filter(|r| r.step <= step).collect();
            }
            log::info!("resuming Stage I at step {step}");
        }
    }
    let batch_rng = CounterRng::labeled(seed, "smga-batches");
    let save = |trainer: &SmgaTrainer, history: &[LossRecord]| -> Result<()> {
        write_csv(&csv_path, history)?;
        let totals: Vec<f64> = history.iter().map(|r| r.total).collect();
        write_png(&dir.join("smga_loss.png"), &plot::line_chart(&[smoothed(&totals, 25)], 480, 240))?;
        Checkpoint::from_store(SMGA_KIND, header.clone(), schedule.clone(), trainer.step, seed, &trainer.store)?
            .save(&ckpt_path)
    };
    while trainer.step < train.steps {
        let mut rng = batch_rng.fork(trainer.step as u64);
        let picks: Vec<&Clip> = (0..train.batch_size)
            .map(|_| clips[rng.below(clips.len() as u64) as usize])
            .collect();
        let poses: Vec<&PoseSequence> = picks.iter().map(|c| &c.poses).collect();
        let audio: Vec<&AudioFeatureSequence> = picks.iter().map(|c| &c.audio).collect();
        let batch = SmgaBatch::from_clips(&poses, &audio, DType::F32)?;
        let rec = trainer.train_step(&batch)?;
        if !rec.total.is_finite() {
            return Err(MmgtError::NonFinite("Stage I loss"));
        }
        history.push(rec);
        if trainer.step % every == 0 || trainer.step == train.steps {
            log::info!("stage I step {} loss {:.5}", trainer.step, rec.total);
            save(&trainer, &history)?;
        }
    }
    if !ckpt_path.exists() {
        save(&trainer, &history)?;
    }
    Ok(SmgaRun { trainer, history })
}

pub fn load_smga(path: &Path) -> Result<(SmgaModel, ParamStore, DiffusionSchedule)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(SMGA_KIND)?;
    let cfg: SmgaConfig = model_config(&ckpt)?;
    let mut store = ParamStore::new(ckpt.header.seed, DType::F32);
    let model = SmgaModel::new(cfg, &mut store)?;
    ckpt.restore_into(&store)?;
    Ok((model, store, DiffusionSchedule::new(ckpt.header.schedule.clone())?))
}

/// Centred moving average with window `k`, for plotting and for the learning
/// signal check.
pub fn smoothed(values: &[f64], k: usize) -> Vec<f64> {
    let half = k / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Samples poses for `(p0, audio)` pairs in chunks; element `i` of a chunk
/// draws its noise from stream `i`, so the result is independent of the
/// other elements.
pub fn sample_poses(
    model: &SmgaModel,
    schedule: &DiffusionSchedule,
    p0: &[ndarray::Array2<f32>],
    audio: &[&AudioFeatureSequence],
    seed: u64,
) -> Result<Vec<PoseSequence>> {
    if p0.len() != audio.len() {
        return Err(MmgtError::ShapeMismatch("p0 and audio counts differ".into()));
    }
    let mut out = Vec::with_capacity(p0.len());
    let seeds = CounterRng::labeled(seed, "sample-chunks");
    for (k, (ps, aus)) in p0.chunks(SAMPLE_CHUNK).zip(audio.chunks(SAMPLE_CHUNK)).enumerate() {
        let (cp, _) = ps[0].dim();
        let (n, da) = aus[0].data.dim();
        let pv: Vec<f32> = ps.iter().flat_map(|p| p.iter().copied()).collect();
        let mut av: Vec<f32> = Vec::with_capacity(aus.len() * n * da);
        for a in aus {
            if a.data.dim() != (n, da) {
                return Err(MmgtError::ShapeMismatch("audio clips differ in shape".into()));
            }
            av.extend(a.data.iter());
        }
        let b = ps.len();
        let p0t = Tensor::from_vec(pv, (b, cp, 3), &Device::Cpu)?;
        let at = Tensor::from_vec(av, (b, n, da), &Device::Cpu)?;
        let chunk_seed = seeds.fork(k as u64).next_u64();
        let poses = tensor_to_batch(&sample_batch(model, schedule, &p0t, &at, chunk_seed)?)?;
        for i in 0..b {
            out.push(PoseSequence::new(poses.index_axis(ndarray::Axis(0), i).to_owned(), aus[i].fps)?);
        }
    }
    Ok(out)
}

/// Samples one pose clip per held-out clip, conditioned on its first frame
/// and audio.
pub fn sample_for_clips(model: &SmgaModel, schedule: &DiffusionSchedule, clips: &[&Clip], seed: u64) -> Result<Vec<PoseSequence>> {
    let p0: Vec<_> = clips.iter().map(|c| c.poses.frame(0)).collect();
    let audio: Vec<_> = clips.iter().map(|c| &c.audio).collect();
    sample_poses(model, schedule, &p0, &audio, seed)
}

/// Mean correlation between sampled lip opening and the lip-driving audio
/// channel.
pub fn lip_audio_correlation(poses: &[PoseSequence], audio: &[&AudioFeatureSequence]) -> f64 {
    let total: f64 = poses
        .iter()
        .zip(audio)
        .map(|(p, a)| {
            let env: Vec<f64> = a.data.column(0).iter().map(|&v| v as f64).collect();
            let r = pearson(&lip_opening(p), &env);
            if r.is_finite() {
                r
            } else {
                0.0
            }
        })
        .sum();
    total / poses.len().max(1) as f64
}

pub fn fit_autoencoder(cfg: &RunConfig, clips: &[&Clip]) -> Result<(PoseAutoencoder, Vec<f64>)> {
    let poses: Vec<&PoseSequence> = clips.iter().map(|c| &c.poses).collect();
    let mut ae_cfg = cfg.eval.autoencoder.clone();
    ae_cfg.seed = cfg.seed;
    train_pose_autoencoder(&poses, &ae_cfg)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseScores {
    pub fgd: f64,
    pub diversity: f64,
}

pub fn pose_scores(ae: &PoseAutoencoder, real: &[&PoseSequence], generated: &[&PoseSequence], pairs: usize, seed: u64) -> Result<PoseScores> {
    let fr = ae.encode(real)?;
    let fg = ae.encode(generated)?;
    Ok(PoseScores {
        fgd: frechet_distance(&FeatureStats::from_features(&fr)?, &FeatureStats::from_features(&fg)?)?,
        diversity: diversity(&fg, pairs, seed)?,
    })
}

fn slice_video(v: &Video, start: usize, len: usize) -> Video {
    Video {
        data: v.data.slice(ndarray::s![start..start + len, .., .., ..]).to_owned(),
        fps: v.fps,
    }
}

/// A video-stage training example from a corpus clip window, with the masks
/// passed through the ablation.
pub fn video_example(
    clip: &Clip,
    cfg: &VideoGenConfig,
    layout: &KeypointLayout,
    start: usize,
    ablation: &dyn Ablation,
) -> Result<VideoExample> {
    let len = cfg.clip_len;
    let window = ClipWindow { start_frame: start, length: len };
    let frames = clip
        .frames
        .as_ref()
        .ok_or_else(|| MmgtError::InvalidArgument(format!("clip {} has no rendered frames", clip.id)))?;
    let pose_frames = clip
        .pose_frames
        .as_ref()
        .ok_or_else(|| MmgtError::InvalidArgument(format!("clip {} has no pose frames", clip.id)))?;
    let poses = clip.poses.window(window)?;
    let audio = clip.audio.window(window)?;
    let [h, w] = cfg.image_size;
    let masks = ablation.masks(motion_masks(&poses, layout, h, w)?);
    let levels = mask_levels(&masks.face_hands, &masks.lips, &masks.background, cfg)?;
    VideoExample::new(
        &slice_video(frames, start, len),
        &slice_video(pose_frames, start, len),
        levels,
        &audio,
        clip.speaker_id,
        cfg,
    )
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VideoLossRow {
    pub step: usize,
    pub loss: f64,
}

pub struct VideoRun {
    pub trainer: VideoTrainer,
    pub history: Vec<VideoLossRow>,
}

fn video_header_config(model: &VideoGenConfig, train: &VideoTrainConfig) -> serde_json::Value {
    json!({ "model": model, "train": train })
}

/// Trains Stage II, cycling through `examples`; writes `video.ckpt`,
/// `video_loss.csv` and `video_loss.png` under `dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_video(
    model: &VideoGenConfig,
    train: &VideoTrainConfig,
    schedule: &ScheduleConfig,
    seed: u64,
    examples: &[VideoExample],
    dir: &Path,
    resume: bool,
    every: usize,
) -> Result<VideoRun> {
    if examples.is_empty() {
        return Err(MmgtError::InsufficientData("no video examples".into()));
    }
    std::fs::create_dir_all(dir)?;
    let sched = DiffusionSchedule::new(schedule.clone())?;
    let mut trainer = VideoTrainer::new(model.clone(), sched, train.clone(), seed, DType::F32)?;
    let header = video_header_config(model, train);
    let ckpt_path = dir.join("video.ckpt");
    let csv_path = dir.join("video_loss.csv");
    let mut history: Vec<VideoLossRow> = Vec::new();
    if resume {
        if let Some(step) = try_resume(&ckpt_path, VIDEO_KIND, &header, schedule, seed, &trainer.store)? {
            trainer.resume_at(step);
            if csv_path.exists() {
                history = read_csv::<VideoLossRow>(&csv_path)?.into_iter().filter(|r| r.step <= step).collect();
            }
            log::info!("resuming Stage II at step {step}");
        }
    }
    let save = |trainer: &VideoTrainer, history: &[VideoLossRow]| -> Result<()> {
        write_csv(&csv_path, history)?;
        let losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
        write_png(&dir.join("video_loss.png"), &plot::line_chart(&[smoothed(&losses, 25)], 480, 240))?;
        Checkpoint::from_store(VIDEO_KIND, header.clone(), schedule.clone(), trainer.step, seed, &trainer.store)?
            .save(&ckpt_path)
    };
    let bs = train.batch_size.max(1);
    while trainer.step < train.steps {
        let refs: Vec<&VideoExample> = (0..bs).map(|i| &examples[(trainer.step * bs + i) % examples.len()]).collect();
        let batch = VideoBatch::new(&refs, DType::F32)?;
        let loss = trainer.train_step(&batch)?;
        history.push(VideoLossRow { step: trainer.step, loss });
        if trainer.step % every == 0 || trainer.step == train.steps {
            log::info!("stage II step {} loss {:.5}", trainer.step, loss);
            save(&trainer, &history)?;
        }
    }
    if !ckpt_path.exists() {
        save(&trainer, &history)?;
    }
    Ok(VideoRun { trainer, history })
}

pub fn load_video(path: &Path) -> Result<(VideoGenModel, ParamStore, DiffusionSchedule)> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind(VIDEO_KIND)?;
    let cfg: VideoGenConfig = model_config(&ckpt)?;
    let mut store = ParamStore::new(ckpt.header.seed, DType::F32);
    let model = VideoGenModel::new(cfg, &mut store)?;
    ckpt.restore_into(&store)?;
    Ok((model, store, DiffusionSchedule::new(ckpt.header.schedule.clone())?))
}
