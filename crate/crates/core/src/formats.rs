//! On-disk formats: raw little-endian tensors with small headers, pose JSON
//! lines, PNG frame directories with an `index.json`, and atomic writes.
//!
//! Layouts are described in `docs/formats.md`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::maskgen::{MaskVideo, RegionTag};
use crate::pose::{AudioFeatureSequence, PoseSequence};

/// Writes through a sibling temp file and renames, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| MmgtError::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MmgtError::io_at(e, path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn integrity(path: &Path, reason: impl Into<String>) -> MmgtError {
    MmgtError::Integrity {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn header_u32(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 4 * count {
        return Err(integrity(path, format!("header shorter than {} bytes", 4 * count)));
    }
    Ok((0..count)
        .map(|i| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize)
        .collect())
}

fn f32_body(bytes: &[u8], offset: usize, expected: usize, path: &Path) -> Result<Vec<f32>> {
    let body = &bytes[offset..];
    if body.len() != expected * 4 {
        return Err(integrity(
            path,
            format!("expected {} payload bytes, found {}", expected * 4, body.len()),
        ));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| MmgtError::invalid(format!("{what} {v} does not fit the header")))
}

/// `u32 N, u32 Cp`, then `N * Cp * 3` float32 values.
pub fn encode_poses(poses: &PoseSequence) -> Result<Vec<u8>> {
    let (n, cp, _) = poses.data.dim();
    let mut out = Vec::with_capacity(8 + poses.data.len() * 4);
    out.extend(to_u32(n, "frame count")?.to_le_bytes());
    out.extend(to_u32(cp, "keypoint count")?.to_le_bytes());
    for v in poses.data.iter() {
        out.extend(v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_poses(bytes: &[u8], fps: f32, path: &Path) -> Result<PoseSequence> {
    let h = header_u32(bytes, 2, path)?;
    let data = f32_body(bytes, 8, h[0] * h[1] * 3, path)?;
    let arr = Array3::from_shape_vec((h[0], h[1], 3), data).map_err(|e| integrity(path, e.to_string()))?;
    PoseSequence::new(arr, fps)
}

pub fn write_poses_bin(path: &Path, poses: &PoseSequence) -> Result<()> {
    write_atomic(path, &encode_poses(poses)?)
}

pub fn read_poses_bin(path: &Path, fps: f32) -> Result<PoseSequence> {
    decode_poses(&read_file(path)?, fps, path)
}

/// `u32 N, u32 Da`, then `N * Da` float32 values.
pub fn encode_audio(audio: &AudioFeatureSequence) -> Result<Vec<u8>> {
    let (n, d) = audio.data.dim();
    let mut out = Vec::with_capacity(8 + audio.data.len() * 4);
    out.extend(to_u32(n, "frame count")?.to_le_bytes());
    out.extend(to_u32(d, "feature dim")?.to_le_bytes());
    for v in audio.data.iter() {
        out.extend(v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_audio_bin(path: &Path, audio: &AudioFeatureSequence) -> Result<()> {
    write_atomic(path, &encode_audio(audio)?)
}

pub fn read_audio_bin(path: &Path, fps: f32) -> Result<AudioFeatureSequence> {
    let bytes = read_file(path)?;
    let h = header_u32(&bytes, 2, path)?;
    let data = f32_body(&bytes, 8, h[0] * h[1], path)?;
    let arr = Array2::from_shape_vec((h[0], h[1]), data).map_err(|e| integrity(path, e.to_string()))?;
    AudioFeatureSequence::new(arr, fps)
}

/// One JSON array of `[x, y, conf]` triples per line.
pub fn encode_poses_jsonl(poses: &PoseSequence) -> Result<String> {
    let mut out = String::new();
    for n in 0..poses.frames() {
        let frame: Vec<[f32; 3]> = poses
            .frame(n)
            .outer_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        out.push_str(&serde_json::to_string(&frame)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_poses_jsonl(path: &Path, poses: &PoseSequence) -> Result<()> {
    write_atomic(path, encode_poses_jsonl(poses)?.as_bytes())
}

pub fn read_poses_jsonl(path: &Path, fps: f32) -> Result<PoseSequence> {
    let f = fs::File::open(path).map_err(|e| MmgtError::io_at(e, path))?;
    let mut frames: Vec<Vec<[f32; 3]>> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: Vec<[f32; 3]> =
            serde_json::from_str(&line).map_err(|e| integrity(path, format!("line {}: {e}", i + 1)))?;
        if let Some(first) = frames.first() {
            if first.len() != frame.len() {
                return Err(integrity(path, format!("line {} has {} keypoints, expected {}", i + 1, frame.len(), first.len())));
            }
        }
        frames.push(frame);
    }
    let n = frames.len();
    let cp = frames.first().map_or(0, |f| f.len());
    let data: Vec<f32> = frames.into_iter().flatten().flatten().collect();
    let arr = Array3::from_shape_vec((n, cp, 3), data).map_err(|e| integrity(path, e.to_string()))?;
    PoseSequence::new(arr, fps)
}

/// Reads poses from `.jsonl` or the binary format, chosen by extension.
pub fn read_poses_any(path: &Path, fps: f32) -> Result<PoseSequence> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => read_poses_jsonl(path, fps),
        _ => read_poses_bin(path, fps),
    }
}

/// `u32 N, u32 H, u32 W`, then `N * H * W` bytes.
pub fn encode_mask(mask: &MaskVideo) -> Result<Vec<u8>> {
    let (n, h, w) = mask.data.dim();
    let mut out = Vec::with_capacity(12 + mask.data.len());
    out.extend(to_u32(n, "frame count")?.to_le_bytes());
    out.extend(to_u32(h, "height")?.to_le_bytes());
    out.extend(to_u32(w, "width")?.to_le_bytes());
    out.extend(mask.data.iter());
    Ok(out)
}

pub fn write_mask_bin(path: &Path, mask: &MaskVideo) -> Result<()> {
    write_atomic(path, &encode_mask(mask)?)
}

pub fn read_mask_bin(path: &Path, region: RegionTag) -> Result<MaskVideo> {
    let bytes = read_file(path)?;
    let h = header_u32(&bytes, 3, path)?;
    let body = &bytes[12..];
    if body.len() != h[0] * h[1] * h[2] {
        return Err(integrity(path, format!("expected {} mask bytes, found {}", h[0] * h[1] * h[2], body.len())));
    }
    let data = Array3::from_shape_vec((h[0], h[1], h[2]), body.to_vec()).map_err(|e| integrity(path, e.to_string()))?;
    let mask = MaskVideo { data, region };
    if !mask.is_binary() {
        return Err(integrity(path, "mask values must be 0 or 255"));
    }
    Ok(mask)
}

/// An 8-bit RGB clip, `N x H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub data: Array4<u8>,
    pub fps: f32,
}

impl Video {
    pub fn black(frames: usize, height: usize, width: usize, fps: f32) -> Self {
        Self {
            data: Array4::zeros((frames, height, width, 3)),
            fps,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn frame_image(&self, n: usize) -> RgbImage {
        let (h, w) = self.size();
        let raw: Vec<u8> = self.data.slice(ndarray::s![n, .., .., ..]).iter().copied().collect();
        RgbImage::from_raw(w as u32, h as u32, raw).expect("frame buffer matches its size")
    }

    pub fn from_images(images: &[RgbImage], fps: f32) -> Result<Self> {
        let first = images.first().ok_or_else(|| MmgtError::invalid("video needs at least one frame"))?;
        let (w, h) = first.dimensions();
        let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
        for img in images {
            if img.dimensions() != (w, h) {
                return Err(MmgtError::shape("all frames must share one size"));
            }
            data.extend_from_slice(img.as_raw());
        }
        let data = Array4::from_shape_vec((images.len(), h as usize, w as usize, 3), data)
            .map_err(|e| MmgtError::shape(e.to_string()))?;
        Ok(Self { data, fps })
    }
}

/// Contents of a frame directory's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameIndex {
    pub fps: f32,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub channels: usize,
    pub files: Vec<String>,
}

pub fn frame_name(n: usize) -> String {
    format!("frame_{n:05}.png")
}

fn png_bytes(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &png_bytes(image::DynamicImage::ImageRgb8(img.clone()))?)
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    Ok(image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8())
}

fn write_index(dir: &Path, fps: f32, h: usize, w: usize, n: usize, channels: usize) -> Result<()> {
    write_json(
        &dir.join("index.json"),
        &FrameIndex {
            fps,
            width: w,
            height: h,
            frames: n,
            channels,
            files: (0..n).map(frame_name).collect(),
        },
    )
}

pub fn write_video_dir(dir: &Path, video: &Video) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = video.size();
    for n in 0..video.frames() {
        write_png(&dir.join(frame_name(n)), &video.frame_image(n))?;
    }
    write_index(dir, video.fps, h, w, video.frames(), 3)
}

pub fn read_video_dir(dir: &Path) -> Result<Video> {
    let index_path = dir.join("index.json");
    let index: FrameIndex = read_json(&index_path)?;
    let mut images = Vec::with_capacity(index.frames);
    for name in &index.files {
        let img = read_png_rgb(&dir.join(name))?;
        if img.dimensions() != (index.width as u32, index.height as u32) {
            return Err(integrity(&dir.join(name), "frame size differs from index.json"));
        }
        images.push(img);
    }
    if images.len() != index.frames {
        return Err(integrity(&index_path, "file list length differs from frame count"));
    }
    Video::from_images(&images, index.fps)
}

/// Writes a mask video as 8-bit grayscale PNG frames.
pub fn write_mask_dir(dir: &Path, mask: &MaskVideo, fps: f32) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (n, h, w) = mask.data.dim();
    for i in 0..n {
        let raw: Vec<u8> = mask.data.slice(ndarray::s![i, .., ..]).iter().copied().collect();
        let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("mask buffer matches its size");
        write_atomic(&dir.join(frame_name(i)), &png_bytes(image::DynamicImage::ImageLuma8(img))?)?;
    }
    write_index(dir, fps, h, w, n, 1)
}

pub fn read_mask_dir(dir: &Path, region: RegionTag) -> Result<MaskVideo> {
    let index: FrameIndex = read_json(&dir.join("index.json"))?;
    let mut data = Vec::with_capacity(index.frames * index.width * index.height);
    for name in &index.files {
        let p = dir.join(name);
        let bytes = read_file(&p)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_luma8();
        if img.dimensions() != (index.width as u32, index.height as u32) {
            return Err(integrity(&p, "frame size differs from index.json"));
        }
        data.extend_from_slice(img.as_raw());
    }
    let data = Array3::from_shape_vec((index.files.len(), index.height, index.width), data)
        .map_err(|e| MmgtError::shape(e.to_string()))?;
    Ok(MaskVideo { data, region })
}

/// Lists `dir` entries whose names start with `prefix`, sorted.
pub fn list_prefixed(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| MmgtError::io_at(e, dir))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with(prefix))
        .map(|e| e.path())
        .collect();
    out.sort();
    Ok(out)
}
