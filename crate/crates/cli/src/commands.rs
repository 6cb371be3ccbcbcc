//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmgt::ablation::{ablations, Ablation};
use mmgt::audio::{audio_features, read_wav, synthesize_wav, write_wav};
use mmgt::data::Clip;
use mmgt::formats::{
    read_json, read_png_rgb, read_poses_any, read_poses_bin, read_video_dir, write_audio_bin,
    write_atomic, write_json, write_mask_bin, write_mask_dir, write_png, write_poses_bin, write_poses_jsonl,
    write_video_dir, Video,
};
use mmgt::maskgen::{motion_masks, MotionMasks};
use mmgt::metrics::{psnr, ssim};
use mmgt::pose::{AudioFeatureSequence, ClipWindow, KeypointLayout, PoseSequence};
use mmgt::render::render_pose_video;
use mmgt::schedule::DiffusionSchedule;
use mmgt::smga::{self, SmgaModel, SmgaTrainConfig};
use mmgt::videogen::{mask_levels, sample_video, VideoExample, VideoGenModel, VideoTrainConfig};
use mmgt::MmgtError;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::stages::{self, PoseScores};
use crate::{plot, Cli, Command, GlobalArgs, PipelineInputs, SampleVideoArgs};

/// Resolved configuration for one invocation.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(g: &GlobalArgs) -> Result<Self> {
        if g.device != "cpu" {
            bail!("device '{}' is not available; only 'cpu' is supported", g.device);
        }
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        if let Some(o) = &g.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(Self {
            out: cfg.out_dir.clone(),
            cfg,
        })
    }

    fn layout(&self) -> KeypointLayout {
        self.cfg.corpus.layout()
    }

    fn corpus(&self) -> Result<Vec<Clip>> {
        let (clips, dir) = stages::ensure_corpus(&self.cfg.corpus, &self.out)?;
        log::info!("corpus: {} clips at {}", clips.len(), dir.display());
        Ok(clips)
    }

    fn save_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        self.cfg.save(&self.out.join("config.json"))?;
        Ok(())
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let run = Run::new(&cli.global)?;
    match cli.command {
        Command::GenData => gen_data(&run),
        Command::TrainSmga { resume } => train_smga(&run, resume).map(|_| ()),
        Command::SampleSmga {
            ckpt,
            audio,
            pose0,
            frames,
        } => sample_smga(&run, &ckpt, &audio, &pose0, frames),
        Command::Masks { poses, layout, size } => masks(&run, &poses, layout.as_deref(), &size),
        Command::TrainVideo { resume } => train_video(&run, resume).map(|_| ()),
        Command::SampleVideo(args) => sample_video_cmd(&run, &args),
        Command::Pipeline {
            inputs,
            train_first,
            ckpt1,
            ckpt2,
        } => pipeline(&run, &inputs, train_first, ckpt1, ckpt2).map(|_| ()),
        Command::Eval { real, gen } => eval(&run, &real, &gen).map(|_| ()),
        Command::Sweep { ratios } => {
            let ratios = match ratios {
                Some(s) => parse_ratios(&s)?,
                None => run.cfg.sweep.ratios.clone(),
            };
            sweep(&run, &ratios).map(|_| ())
        }
        Command::Ablate { variant } => {
            let names = if variant == "all" {
                run.cfg.ablation.variants.clone()
            } else {
                vec![variant]
            };
            ablate(&run, &names).map(|_| ())
        }
        Command::Visualize { input, output } => visualize(&run, &input, &output),
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MmgtError::NotFound(path.to_path_buf()).into());
    }
    Ok(())
}

pub fn gen_data(run: &Run) -> Result<()> {
    let (clips, dir) = stages::ensure_corpus(&run.cfg.corpus, &run.out)?;
    println!("{} clips in {}", clips.len(), dir.display());
    Ok(())
}

pub fn smga_dir(run: &Run) -> PathBuf {
    run.out.join("smga")
}

pub fn video_dir(run: &Run) -> PathBuf {
    run.out.join("video")
}

pub fn train_smga(run: &Run, resume: bool) -> Result<stages::SmgaRun> {
    run.save_config()?;
    let clips = run.corpus()?;
    let (train, _) = stages::split(&clips, run.cfg.eval.held_out);
    let r = stages::train_smga(
        &run.cfg.smga,
        &run.cfg.smga_train,
        &run.cfg.schedule,
        run.cfg.seed,
        &train,
        &smga_dir(run),
        resume,
        run.cfg.checkpoint_every,
    )?;
    if let Some(last) = r.history.last() {
        println!("stage I: {} steps, final loss {:.5}", last.step, last.total);
    }
    Ok(r)
}

/// Video-stage examples from the first configured corpus clips.
fn video_examples(run: &Run, clips: &[Clip], ablation: &dyn Ablation, vcfg: &mmgt::videogen::VideoGenConfig) -> Result<Vec<VideoExample>> {
    let layout = run.layout();
    clips
        .iter()
        .take(run.cfg.video_data.clips)
        .map(|c| stages::video_example(c, vcfg, &layout, run.cfg.video_data.window_start, ablation).map_err(Into::into))
        .collect()
}

pub fn train_video(run: &Run, resume: bool) -> Result<stages::VideoRun> {
    run.save_config()?;
    let clips = run.corpus()?;
    let base = ablations().get("base")?;
    let examples = video_examples(run, &clips, base.as_ref(), &run.cfg.videogen)?;
    let r = stages::train_video(
        &run.cfg.videogen,
        &run.cfg.video_train,
        &run.cfg.schedule,
        run.cfg.seed,
        &examples,
        &video_dir(run),
        resume,
        run.cfg.checkpoint_every,
    )?;
    if let Some(last) = r.history.last() {
        println!("stage II: {} steps, final loss {:.5}", last.step, last.loss);
    }
    Ok(r)
}

/// Audio features from a WAV file or a binary feature file.
pub fn load_audio(path: &Path, fps: f32, dim: usize) -> Result<AudioFeatureSequence> {
    require(path)?;
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let audio = if is_wav {
        audio_features(&read_wav(path)?, fps, dim)?
    } else {
        mmgt::formats::read_audio_bin(path, fps)?
    };
    if audio.dim() != dim {
        bail!("{} has {}-dim audio features, the model expects {dim}", path.display(), audio.dim());
    }
    Ok(audio)
}

fn first_frames(audio: &AudioFeatureSequence, n: usize) -> Result<AudioFeatureSequence> {
    if audio.frames() < n {
        return Err(MmgtError::InsufficientData(format!("audio has {} frames, {n} are needed", audio.frames())).into());
    }
    Ok(audio.window(ClipWindow { start_frame: 0, length: n })?)
}

const MASK_NAMES: [&str; 5] = ["face", "lips", "hands", "face_hands", "background"];

fn write_masks(dir: &Path, masks: &MotionMasks, fps: f32) -> Result<()> {
    let all = [&masks.face, &masks.lips, &masks.hands, &masks.face_hands, &masks.background];
    for (name, m) in MASK_NAMES.iter().zip(all) {
        write_mask_dir(&dir.join(name), m, fps)?;
        write_mask_bin(&dir.join(format!("{name}.bin")), m)?;
    }
    Ok(())
}

fn write_poses(dir: &Path, poses: &PoseSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_poses_bin(&dir.join("poses.bin"), poses)?;
    write_poses_jsonl(&dir.join("poses.jsonl"), poses)?;
    Ok(())
}

pub fn sample_smga(run: &Run, ckpt: &Path, audio: &Path, pose0: &Path, frames: Option<usize>) -> Result<()> {
    require(ckpt)?;
    require(pose0)?;
    let (model, _store, sched) = stages::load_smga(ckpt)?;
    let fps = run.cfg.corpus.fps;
    let audio = load_audio(audio, fps, model.config.audio_dim)?;
    let n = frames.unwrap_or(audio.frames()).min(model.config.max_frames);
    let audio = first_frames(&audio, n)?;
    let p0 = read_poses_any(pose0, fps)?.frame(0);
    let [h, w] = run.cfg.corpus.image_size;
    let s = smga::sample(&model, &sched, &p0, &audio, run.cfg.seed, (h, w))?;
    let dir = run.out.join("sample_smga");
    write_poses(&dir, &s.poses)?;
    write_video_dir(&dir.join("pose_video"), &render_pose_video(&s.poses, &model.config.layout, h, w)?)?;
    write_masks(&dir.join("masks"), &s.masks, fps)?;
    println!("wrote {} frames to {}", s.poses.frames(), dir.display());
    Ok(())
}

pub fn parse_size(size: &str) -> Result<(usize, usize)> {
    let (h, w) = size
        .split_once(['x', 'X'])
        .with_context(|| format!("size '{size}' is not of the form HxW"))?;
    let (h, w): (usize, usize) = (h.trim().parse()?, w.trim().parse()?);
    if h == 0 || w == 0 {
        bail!("size must be positive, got {size}");
    }
    Ok((h, w))
}

pub fn masks(run: &Run, poses: &Path, layout: Option<&Path>, size: &str) -> Result<()> {
    require(poses)?;
    let layout = match layout {
        Some(p) => {
            let l: KeypointLayout = read_json(p)?;
            l.validate()?;
            l
        }
        None => run.layout(),
    };
    let (h, w) = parse_size(size)?;
    let fps = run.cfg.corpus.fps;
    let poses = read_poses_any(poses, fps)?;
    let m = motion_masks(&poses, &layout, h, w)?;
    let dir = run.out.join("masks");
    write_masks(&dir, &m, fps)?;
    println!("wrote masks for {} frames to {}", poses.frames(), dir.display());
    Ok(())
}

pub struct Inputs {
    pub audio: AudioFeatureSequence,
    pub reference: Video,
    pub p0: Array2<f32>,
    pub speaker: usize,
}

fn load_reference(path: &Path, fps: f32) -> Result<Video> {
    require(path)?;
    Ok(Video::from_images(&[read_png_rgb(path)?], fps)?)
}

/// Poses, masks and video for one set of inputs; every intermediate is
/// written under `dir`.
pub fn infer(
    run: &Run,
    stage1: (&SmgaModel, &DiffusionSchedule),
    stage2: (&VideoGenModel, &DiffusionSchedule),
    inputs: &Inputs,
    dir: &Path,
) -> Result<Video> {
    let (smga_model, smga_sched) = stage1;
    let (video_model, video_sched) = stage2;
    let vcfg = &video_model.config;
    let [h, w] = vcfg.image_size;
    if inputs.reference.size() != (h, w) {
        bail!(
            "reference image is {:?}, the video model expects {h}x{w}",
            inputs.reference.size()
        );
    }
    if inputs.speaker >= vcfg.num_speakers {
        bail!("speaker {} out of range (model has {})", inputs.speaker, vcfg.num_speakers);
    }
    let layout = &smga_model.config.layout;
    let fps = inputs.audio.fps;
    let audio = first_frames(&inputs.audio, vcfg.clip_len)?;
    std::fs::create_dir_all(dir)?;
    write_audio_bin(&dir.join("audio_features.bin"), &audio)?;

    let s = smga::sample(smga_model, smga_sched, &inputs.p0, &audio, run.cfg.seed, (h, w))?;
    write_poses(dir, &s.poses)?;
    let pose_video = render_pose_video(&s.poses, layout, h, w)?;
    write_video_dir(&dir.join("pose_video"), &pose_video)?;
    write_masks(&dir.join("masks"), &s.masks, fps)?;

    let levels = mask_levels(&s.masks.face_hands, &s.masks.lips, &s.masks.background, vcfg)?;
    let example = VideoExample::from_reference(&inputs.reference, &pose_video, levels, &audio, inputs.speaker, vcfg)?;
    let video = sample_video(video_model, video_sched, &inputs.reference, &example, run.cfg.seed)?;
    write_video_dir(&dir.join("video"), &video)?;
    let frames: Vec<_> = (0..video.frames()).map(|i| video.frame_image(i)).collect();
    write_png(&dir.join("video_strip.png"), &plot::strip(&frames))?;
    Ok(video)
}

pub fn sample_video_cmd(run: &Run, args: &SampleVideoArgs) -> Result<()> {
    for p in [&args.ckpt1, &args.ckpt2, &args.pose0] {
        require(p)?;
    }
    let (m1, _s1, sch1) = stages::load_smga(&args.ckpt1)?;
    let (m2, _s2, sch2) = stages::load_video(&args.ckpt2)?;
    let fps = run.cfg.corpus.fps;
    let inputs = Inputs {
        audio: load_audio(&args.audio, fps, m1.config.audio_dim)?,
        reference: load_reference(&args.reference, fps)?,
        p0: read_poses_any(&args.pose0, fps)?.frame(0),
        speaker: args.speaker,
    };
    let dir = run.out.join("sample_video");
    infer(run, (&m1, &sch1), (&m2, &sch2), &inputs, &dir)?;
    println!("wrote video to {}", dir.join("video").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.push(ManifestEntry {
                path: rel,
                bytes: e.metadata()?.len(),
            });
        }
    }
    Ok(())
}

/// End-to-end run; returns the directory holding the outputs.
pub fn pipeline(
    run: &Run,
    inputs: &PipelineInputs,
    train_first: bool,
    ckpt1: Option<PathBuf>,
    ckpt2: Option<PathBuf>,
) -> Result<PathBuf> {
    for p in [&inputs.audio, &inputs.reference, &inputs.pose0].into_iter().flatten() {
        require(p)?;
    }
    let ckpt1 = ckpt1.unwrap_or_else(|| smga_dir(run).join("smga.ckpt"));
    let ckpt2 = ckpt2.unwrap_or_else(|| video_dir(run).join("video.ckpt"));
    for (ckpt, stage) in [(&ckpt1, 1), (&ckpt2, 2)] {
        if ckpt.exists() {
            continue;
        }
        if !train_first {
            return Err(anyhow::Error::from(MmgtError::NotFound(ckpt.clone()))
                .context(format!("no stage {stage} checkpoint (pass --train-first to train one)")));
        }
        let default = if stage == 1 {
            smga_dir(run).join("smga.ckpt")
        } else {
            video_dir(run).join("video.ckpt")
        };
        if *ckpt != default {
            bail!("--train-first writes {}, not {}", default.display(), ckpt.display());
        }
        if stage == 1 {
            train_smga(run, true)?;
        } else {
            train_video(run, true)?;
        }
    }
    let (m1, _s1, sch1) = stages::load_smga(&ckpt1)?;
    let (m2, _s2, sch2) = stages::load_video(&ckpt2)?;
    let fps = run.cfg.corpus.fps;
    let dir = run.out.join("pipeline");
    let input_dir = dir.join("inputs");
    std::fs::create_dir_all(&input_dir)?;

    let needs_corpus = inputs.audio.is_none() || inputs.reference.is_none() || inputs.pose0.is_none();
    let clips = if needs_corpus { run.corpus()? } else { Vec::new() };
    let demo = clips.last();
    let audio_path = match &inputs.audio {
        Some(p) => p.clone(),
        None => {
            let clip = demo.expect("corpus loaded");
            let p = input_dir.join("audio.wav");
            write_wav(&p, &synthesize_wav(&clip.audio, 16_000))?;
            p
        }
    };
    let audio = load_audio(&audio_path, fps, m1.config.audio_dim)?;
    let reference = match &inputs.reference {
        Some(p) => load_reference(p, fps)?,
        None => {
            let clip = demo.expect("corpus loaded");
            let frames = clip
                .frames
                .as_ref()
                .context("corpus clips have no rendered frames (corpus.render is false)")?;
            let img = frames.frame_image(0);
            write_png(&input_dir.join("reference.png"), &img)?;
            Video::from_images(&[img], fps)?
        }
    };
    let p0 = match &inputs.pose0 {
        Some(p) => read_poses_any(p, fps)?.frame(0),
        None => {
            let clip = demo.expect("corpus loaded");
            let first = clip.poses.window(ClipWindow { start_frame: 0, length: 1 })?;
            write_poses_jsonl(&input_dir.join("pose0.jsonl"), &first)?;
            first.frame(0)
        }
    };
    let inputs = Inputs {
        audio,
        reference,
        p0,
        speaker: inputs.speaker,
    };
    infer(run, (&m1, &sch1), (&m2, &sch2), &inputs, &dir)?;
    let mut files = Vec::new();
    list_files(&dir, &dir, &mut files)?;
    files.retain(|f| f.path != "manifest.json");
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "seed": run.cfg.seed,
            "smga_checkpoint": ckpt1,
            "video_checkpoint": ckpt2,
            "files": files,
        }),
    )?;
    println!("pipeline outputs in {}", dir.display());
    Ok(dir)
}

/// A clip directory for evaluation: `poses.bin` plus optional `frames/`.
pub struct EvalClip {
    pub name: String,
    pub poses: PoseSequence,
    pub frames: Option<Video>,
}

fn clip_fps(dir: &Path, default: f32) -> f32 {
    #[derive(Deserialize)]
    struct Fps {
        fps: f32,
    }
    std::fs::read(dir.join("meta.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<Fps>(&b).ok())
        .map_or(default, |m| m.fps)
}

pub fn load_eval_clips(root: &Path, fps: f32) -> Result<Vec<EvalClip>> {
    require(root)?;
    let dirs: Vec<PathBuf> = if root.join("poses.bin").exists() {
        vec![root.to_path_buf()]
    } else {
        let mut d: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("poses.bin").exists())
            .collect();
        d.sort();
        d
    };
    if dirs.is_empty() {
        return Err(MmgtError::InsufficientData(format!("no clip directories with poses.bin under {}", root.display())).into());
    }
    dirs.iter()
        .map(|d| {
            let fps = clip_fps(d, fps);
            Ok(EvalClip {
                name: d.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                poses: read_poses_bin(&d.join("poses.bin"), fps)?,
                frames: if d.join("frames").join("index.json").exists() {
                    Some(read_video_dir(&d.join("frames"))?)
                } else {
                    None
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub fgd: f64,
    pub div: f64,
    /// Mean over clip pairs with frames on both sides and finite PSNR.
    pub psnr_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
    /// Pairs whose frames were identical (infinite PSNR).
    pub identical_clips: usize,
    pub real_clips: usize,
    pub gen_clips: usize,
    pub autoencoder_mse: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvalRow {
    clip: String,
    feature_distance: f64,
    psnr: Option<f64>,
    ssim: Option<f64>,
}

pub fn eval(run: &Run, real: &Path, gen: &Path) -> Result<EvalReport> {
    let fps = run.cfg.corpus.fps;
    let real = load_eval_clips(real, fps)?;
    let gen = load_eval_clips(gen, fps)?;
    let report_path = if run.out.extension().is_some_and(|e| e == "json") {
        run.out.clone()
    } else {
        run.out.join("report.json")
    };
    let base = report_path.with_extension("");
    let real_poses: Vec<&PoseSequence> = real.iter().map(|c| &c.poses).collect();
    let gen_poses: Vec<&PoseSequence> = gen.iter().map(|c| &c.poses).collect();
    let mut ae_cfg = run.cfg.eval.autoencoder.clone();
    ae_cfg.seed = run.cfg.seed;
    let (ae, history) = mmgt::metrics::train_pose_autoencoder(&real_poses, &ae_cfg)?;
    let scores = stages::pose_scores(&ae, &real_poses, &gen_poses, run.cfg.eval.diversity_pairs, run.cfg.seed)?;
    let fr = ae.encode(&real_poses)?;
    let fg = ae.encode(&gen_poses)?;

    let mut rows = Vec::new();
    let (mut psnrs, mut ssims, mut identical) = (Vec::new(), Vec::new(), 0);
    for (i, g) in gen.iter().enumerate() {
        let r = real.get(i);
        let feature_distance = if i < fr.nrows() {
            (&fg.row(i) - &fr.row(i)).mapv(|v| v * v).sum().sqrt()
        } else {
            f64::NAN
        };
        let (mut p, mut s) = (None, None);
        if let (Some(a), Some(b)) = (r.and_then(|r| r.frames.as_ref()), g.frames.as_ref()) {
            if a.data.dim() == b.data.dim() {
                let pv = psnr(&a.data, &b.data, 255.0)?;
                let sv = ssim(&a.data, &b.data, 255.0)?;
                if pv.is_finite() {
                    psnrs.push(pv);
                    p = Some(pv);
                } else {
                    identical += 1;
                }
                ssims.push(sv);
                s = Some(sv);
            }
        }
        rows.push(EvalRow {
            clip: g.name.clone(),
            feature_distance,
            psnr: p,
            ssim: s,
        });
    }
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let report = EvalReport {
        fgd: scores.fgd,
        div: scores.diversity,
        psnr_mean: mean(&psnrs),
        ssim_mean: mean(&ssims),
        identical_clips: identical,
        real_clips: real.len(),
        gen_clips: gen.len(),
        autoencoder_mse: history.last().copied().unwrap_or(f64::NAN),
    };
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_json(&report_path, &report)?;
    stages::write_csv(&PathBuf::from(format!("{}_clips.csv", base.display())), &rows)?;
    let k = fg.nrows().min(32);
    let dists: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| (&fg.row(i) - &fg.row(j)).mapv(|v| v * v).sum().sqrt()).collect())
        .collect();
    write_png(&PathBuf::from(format!("{}_diversity.png", base.display())), &plot::heatmap(&dists, 8))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report)
}

pub fn parse_ratios(s: &str) -> Result<Vec<[f64; 2]>> {
    let ratios = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (f, b) = p.split_once(':').with_context(|| format!("ratio '{p}' is not of the form f:b"))?;
            Ok([f.trim().parse()?, b.trim().parse()?])
        })
        .collect::<Result<Vec<[f64; 2]>>>()?;
    if ratios.is_empty() {
        bail!("empty ratio list");
    }
    Ok(ratios)
}

fn published_fgd(ratio: [f64; 2]) -> Option<f64> {
    // full-scale values, reported next to ours for context only
    const PUBLISHED: [([f64; 2], f64); 4] = [([1.0, 1.0], 6.705), ([1.0, 2.0], 7.296), ([1.0, 3.0], 7.268), ([1.0, 4.0], 7.369)];
    PUBLISHED.iter().find(|(r, _)| *r == ratio).map(|(_, v)| *v)
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

fn final_loss(totals: &[f64]) -> f64 {
    let k = totals.len().min(25);
    totals[totals.len() - k..].iter().sum::<f64>() / k.max(1) as f64
}

fn write_gen_clips(dir: &Path, poses: &[PoseSequence], clips: &[&Clip]) -> Result<()> {
    for (p, c) in poses.iter().zip(clips) {
        let d = dir.join(mmgt::data::clip_dir_name(c.id));
        std::fs::create_dir_all(&d)?;
        write_poses_bin(&d.join("poses.bin"), p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: String,
    pub lambda_f: f64,
    pub lambda_b: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub fgd: f64,
    pub diversity: f64,
    pub lip_audio_corr: f64,
    pub published_fgd: Option<f64>,
}

pub fn sweep(run: &Run, ratios: &[[f64; 2]]) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        bail!("empty ratio list");
    }
    run.save_config()?;
    let clips = run.corpus()?;
    let (train, held) = stages::split(&clips, run.cfg.eval.held_out);
    let (ae, _) = stages::fit_autoencoder(&run.cfg, &train)?;
    let real: Vec<&PoseSequence> = held.iter().map(|c| &c.poses).collect();
    let held_audio: Vec<&AudioFeatureSequence> = held.iter().map(|c| &c.audio).collect();
    let root = run.out.join("sweep");
    let mut rows = Vec::new();
    for &[f, b] in ratios {
        let name = format!("{}:{}", fmt_num(f), fmt_num(b));
        log::info!("sweep ratio {name}");
        let train_cfg = SmgaTrainConfig {
            steps: run.cfg.sweep.steps,
            loss_weights: mmgt::losses::LossWeights { lambda_f: f, lambda_b: b },
            ..run.cfg.smga_train.clone()
        };
        let dir = root.join(format!("ratio_{}_{}", fmt_num(f), fmt_num(b)));
        let r = stages::train_smga(&run.cfg.smga, &train_cfg, &run.cfg.schedule, run.cfg.seed, &train, &dir, false, run.cfg.checkpoint_every)?;
        let gen = stages::sample_for_clips(&r.trainer.model, &r.trainer.schedule, &held, run.cfg.seed)?;
        write_gen_clips(&dir.join("gen"), &gen, &held)?;
        let gen_refs: Vec<&PoseSequence> = gen.iter().collect();
        let PoseScores { fgd, diversity } = stages::pose_scores(&ae, &real, &gen_refs, run.cfg.eval.diversity_pairs, run.cfg.seed)?;
        let totals: Vec<f64> = r.history.iter().map(|h| h.total).collect();
        rows.push(SweepRow {
            ratio: name,
            lambda_f: f,
            lambda_b: b,
            steps: train_cfg.steps,
            final_loss: final_loss(&totals),
            fgd,
            diversity,
            lip_audio_corr: stages::lip_audio_correlation(&gen, &held_audio),
            published_fgd: published_fgd([f, b]),
        });
    }
    stages::write_csv(&root.join("report.csv"), &rows)?;
    let fgds: Vec<f64> = rows.iter().map(|r| r.fgd).collect();
    write_png(&root.join("fgd.png"), &plot::bar_chart(&fgds, 360, 240))?;
    for r in &rows {
        println!("{:>6}  fgd {:.4}  div {:.4}  loss {:.5}", r.ratio, r.fgd, r.diversity, r.final_loss);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub description: String,
    pub seed: u64,
    pub smga_final_loss: f64,
    pub fgd: f64,
    pub diversity: f64,
    pub lip_audio_corr: f64,
    /// Largest pose change when the audio frames are reversed in time.
    pub smga_audio_perm_diff: f64,
    pub video_final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Largest pixel change when the audio frames are reversed in time.
    pub video_audio_perm_diff: f64,
}

fn reversed(a: &AudioFeatureSequence) -> Result<AudioFeatureSequence> {
    let perm: Vec<usize> = (0..a.frames()).rev().collect();
    Ok(a.permuted(&perm)?)
}

fn max_abs_diff<'a>(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64> + 'a) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn ablate(run: &Run, variants: &[String]) -> Result<Vec<AblationRow>> {
    let registry = ablations();
    for v in variants {
        registry.get(v)?;
    }
    run.save_config()?;
    let clips = run.corpus()?;
    let (train, held) = stages::split(&clips, run.cfg.eval.held_out);
    let (ae, _) = stages::fit_autoencoder(&run.cfg, &train)?;
    let real: Vec<&PoseSequence> = held.iter().map(|c| &c.poses).collect();
    let held_audio: Vec<&AudioFeatureSequence> = held.iter().map(|c| &c.audio).collect();
    let rev_audio: Vec<AudioFeatureSequence> = held_audio.iter().map(|a| reversed(a)).collect::<Result<_>>()?;
    let root = run.out.join("ablate");
    let seed = run.cfg.seed;
    let mut names = vec!["base".to_string()];
    names.extend(variants.iter().filter(|v| v.as_str() != "base").cloned());
    let mut rows = Vec::new();
    for name in &names {
        let ab = registry.get(name)?;
        log::info!("ablation {name}");
        let (mut scfg, mut vcfg) = (run.cfg.smga.clone(), run.cfg.videogen.clone());
        ab.configure(&mut scfg, &mut vcfg);
        let dir = root.join(name);

        let train_cfg = SmgaTrainConfig {
            steps: run.cfg.ablation.smga_steps,
            ..run.cfg.smga_train.clone()
        };
        let r = stages::train_smga(&scfg, &train_cfg, &run.cfg.schedule, seed, &train, &dir.join("smga"), false, run.cfg.checkpoint_every)?;
        let (model, sched) = (&r.trainer.model, &r.trainer.schedule);
        let gen = stages::sample_for_clips(model, sched, &held, seed)?;
        write_gen_clips(&dir.join("gen"), &gen, &held)?;
        let p0: Vec<_> = held.iter().map(|c| c.poses.frame(0)).collect();
        let gen_rev = stages::sample_poses(model, sched, &p0, &rev_audio.iter().collect::<Vec<_>>(), seed)?;
        let smga_perm = gen
            .iter()
            .zip(&gen_rev)
            .map(|(a, b)| max_abs_diff(a.data.iter().map(|&v| v as f64), b.data.iter().map(|&v| v as f64)))
            .fold(0.0, f64::max);
        let gen_refs: Vec<&PoseSequence> = gen.iter().collect();
        let scores = stages::pose_scores(&ae, &real, &gen_refs, run.cfg.eval.diversity_pairs, seed)?;
        let totals: Vec<f64> = r.history.iter().map(|h| h.total).collect();

        let examples = video_examples(run, &clips, ab.as_ref(), &vcfg)?;
        let vtrain = VideoTrainConfig {
            steps: run.cfg.ablation.video_steps,
            ..run.cfg.video_train.clone()
        };
        let vr = stages::train_video(&vcfg, &vtrain, &run.cfg.schedule, seed, &examples, &dir.join("video"), false, run.cfg.checkpoint_every)?;
        let (vmodel, vsched) = (&vr.trainer.model, &vr.trainer.schedule);
        let (mut psnr_sum, mut ssim_sum, mut video_perm) = (0.0, 0.0, 0.0f64);
        let k = run.cfg.ablation.video_eval_clips.min(examples.len()).max(1);
        for (i, ex) in examples.iter().take(k).enumerate() {
            let clip = &clips[i];
            let start = run.cfg.video_data.window_start;
            let truth = Video {
                data: clip
                    .frames
                    .as_ref()
                    .context("corpus clips have no rendered frames")?
                    .data
                    .slice(ndarray::s![start..start + vcfg.clip_len, .., .., ..])
                    .to_owned(),
                fps: clip.poses.fps,
            };
            let out = sample_video(vmodel, vsched, &truth, ex, seed)?;
            write_video_dir(&dir.join("samples").join(mmgt::data::clip_dir_name(clip.id)), &out)?;
            psnr_sum += psnr(&truth.data, &out.data, 255.0)?.min(100.0);
            ssim_sum += ssim(&truth.data, &out.data, 255.0)?;
            let mut ex_rev = ex.clone();
            ex_rev.audio = reversed(&ex.audio)?;
            let out_rev = sample_video(vmodel, vsched, &truth, &ex_rev, seed)?;
            let d = max_abs_diff(out.data.iter().map(|&v| v as f64), out_rev.data.iter().map(|&v| v as f64));
            video_perm = video_perm.max(d);
        }
        let vlosses: Vec<f64> = vr.history.iter().map(|h| h.loss).collect();
        rows.push(AblationRow {
            variant: name.clone(),
            description: ab.describe().to_string(),
            seed,
            smga_final_loss: final_loss(&totals),
            fgd: scores.fgd,
            diversity: scores.diversity,
            lip_audio_corr: stages::lip_audio_correlation(&gen, &held_audio),
            smga_audio_perm_diff: smga_perm,
            video_final_loss: final_loss(&vlosses),
            psnr: psnr_sum / k as f64,
            ssim: ssim_sum / k as f64,
            video_audio_perm_diff: video_perm,
        });
    }
    stages::write_csv(&root.join("report.csv"), &rows)?;
    let fgds: Vec<f64> = rows.iter().map(|r| r.fgd).collect();
    write_png(&root.join("fgd.png"), &plot::bar_chart(&fgds, 360, 240))?;
    for r in &rows {
        println!(
            "{:>15}  fgd {:.4}  div {:.4}  psnr {:.2}  audio-perm diff {:.3e}/{:.3e}",
            r.variant, r.fgd, r.diversity, r.psnr, r.smga_audio_perm_diff, r.video_audio_perm_diff
        );
    }
    Ok(rows)
}

pub fn visualize(run: &Run, input: &Path, output: &Path) -> Result<()> {
    require(input)?;
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let img = if input.is_dir() {
        let v = read_video_dir(input)?;
        let frames: Vec<_> = (0..v.frames().min(12)).map(|i| v.frame_image(i)).collect();
        plot::strip(&frames)
    } else if ext == "csv" {
        let mut r = csv::Reader::from_path(input)?;
        let headers = r.headers()?.clone();
        let mut series: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for rec in r.records() {
            for (i, field) in rec?.iter().enumerate() {
                series[i].push(field.parse().unwrap_or(f64::NAN));
            }
        }
        let keep: Vec<Vec<f64>> = headers
            .iter()
            .zip(series)
            .filter(|(h, s)| *h != "step" && s.iter().any(|v| v.is_finite()))
            .map(|(_, s)| stages::smoothed(&s, 25))
            .collect();
        plot::line_chart(&keep, 640, 320)
    } else if ext == "bin" || ext == "jsonl" {
        let poses = read_poses_any(input, run.cfg.corpus.fps)?;
        let [h, w] = run.cfg.corpus.image_size;
        let v = render_pose_video(&poses, &run.layout(), h, w)?;
        let frames: Vec<_> = (0..v.frames().min(12)).map(|i| v.frame_image(i)).collect();
        plot::strip(&frames)
    } else {
        bail!("cannot visualise {}: expected a frame directory, .csv, .bin or .jsonl", input.display());
    };
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    write_atomic(output, &buf.into_inner())?;
    println!("wrote {}", output.display());
    Ok(())
}

