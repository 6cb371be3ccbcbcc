//! Procedural drawing of skeletons: the pose video (fixed per-region colours
//! on black) and the appearance video (a textured backdrop with a stylised
//! figure) that the video stage learns to reproduce.

use ndarray::Array4;

use crate::error::{MmgtError, Result};
use crate::formats::Video;
use crate::pose::{KeypointLayout, PoseSequence};
use crate::rng::CounterRng;

pub const FACE_COLOR: [u8; 3] = [255, 200, 40];
pub const LIPS_COLOR: [u8; 3] = [255, 40, 40];
pub const BODY_COLOR: [u8; 3] = [230, 230, 230];
pub const LEFT_HAND_COLOR: [u8; 3] = [40, 230, 80];
pub const RIGHT_HAND_COLOR: [u8; 3] = [40, 140, 255];

/// Bones to draw. The toy skeleton has an explicit topology; other layouts
/// get a star from each hand's first keypoint.
pub fn skeleton_edges(layout: &KeypointLayout) -> Vec<(usize, usize)> {
    if *layout == KeypointLayout::toy16() {
        return vec![
            (0, 1),
            (0, 2),
            (5, 3),
            (3, 6),
            (5, 4),
            (4, 6),
            (0, 7),
            (7, 8),
            (7, 9),
            (8, 10),
            (9, 11),
            (10, 12),
            (11, 13),
            (12, 14),
            (13, 15),
        ];
    }
    let mut edges = Vec::new();
    for hand in [&layout.left_hand, &layout.right_hand] {
        if let Some((&root, rest)) = hand.split_first() {
            edges.extend(rest.iter().map(|&k| (root, k)));
        }
    }
    edges
}

fn region_color(layout: &KeypointLayout, k: usize) -> [u8; 3] {
    if layout.lips.contains(&k) {
        LIPS_COLOR
    } else if layout.face.contains(&k) {
        FACE_COLOR
    } else if layout.left_hand.contains(&k) {
        LEFT_HAND_COLOR
    } else if layout.right_hand.contains(&k) {
        RIGHT_HAND_COLOR
    } else {
        BODY_COLOR
    }
}

/// Same validity rule as the mask generator: strictly positive coordinates
/// inside the unit square.
fn pixel(x: f32, y: f32, h: usize, w: usize) -> Option<(i64, i64)> {
    if !(x > 0.0 && y > 0.0 && x < 1.0 && y < 1.0) {
        return None;
    }
    Some(((x * w as f32) as i64, (y * h as f32) as i64))
}

struct Canvas<'a> {
    buf: ndarray::ArrayViewMut3<'a, u8>,
    h: i64,
    w: i64,
}

impl Canvas<'_> {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && x < self.w && y < self.h {
            for (ch, v) in c.iter().enumerate() {
                self.buf[[y as usize, x as usize, ch]] = *v;
            }
        }
    }

    fn disc(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), r: i64, c: [u8; 3]) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
        let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            if r == 0 {
                self.put(x, y, c);
            } else {
                self.disc(x, y, r, c);
            }
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(MmgtError::invalid(format!("invalid frame size {h}x{w}")));
    }
    Ok(())
}

fn draw_skeleton(
    canvas: &mut Canvas,
    frame: ndarray::ArrayView2<f32>,
    layout: &KeypointLayout,
    edges: &[(usize, usize)],
    thickness: i64,
    dot: i64,
    color: impl Fn(usize) -> [u8; 3],
) {
    let (h, w) = (canvas.h as usize, canvas.w as usize);
    let pts: Vec<Option<(i64, i64)>> = frame
        .outer_iter()
        .map(|r| pixel(r[0], r[1], h, w))
        .collect();
    for &(a, b) in edges {
        if let (Some(pa), Some(pb)) = (pts.get(a).copied().flatten(), pts.get(b).copied().flatten()) {
            canvas.line(pa, pb, thickness, color(b));
        }
    }
    for (k, p) in pts.iter().enumerate().take(layout.total_channels) {
        if let Some((x, y)) = p {
            canvas.disc(*x, *y, dot, color(k));
        }
    }
}

/// Skeleton in fixed per-region colours on black, one frame per pose.
pub fn render_pose_video(poses: &PoseSequence, layout: &KeypointLayout, h: usize, w: usize) -> Result<Video> {
    check_size(h, w)?;
    if poses.channels() != layout.total_channels {
        return Err(MmgtError::shape("poses do not match the layout"));
    }
    let edges = skeleton_edges(layout);
    let mut video = Video::black(poses.frames(), h, w, poses.fps);
    let dot = (w.min(h) / 64).max(1) as i64 - 1;
    for n in 0..poses.frames() {
        let mut canvas = Canvas {
            buf: video.data.slice_mut(ndarray::s![n, .., .., ..]),
            h: h as i64,
            w: w as i64,
        };
        draw_skeleton(&mut canvas, poses.data.slice(ndarray::s![n, .., ..]), layout, &edges, 0, dot, |k| {
            region_color(layout, k)
        });
    }
    Ok(video)
}

/// Static per-speaker backdrop: two-tone gradient, diagonal stripes and fine
/// grain.
pub fn background_texture(speaker: usize, h: usize, w: usize) -> Array4<u8> {
    let mut rng = CounterRng::labeled(speaker as u64, "backdrop");
    let base: Vec<f64> = (0..6).map(|_| 40.0 + 150.0 * rng.uniform()).collect();
    let freq = 0.15 + 0.25 * rng.uniform();
    let mut img = Array4::<u8>::zeros((1, h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let g = y as f64 / h.max(1) as f64;
            let stripe = ((x as f64 + 0.5 * y as f64) * freq).sin();
            let grain = 8.0 * (rng.uniform() - 0.5);
            for c in 0..3 {
                let v = base[c] * (1.0 - g) + base[c + 3] * g + 14.0 * stripe + grain;
                img[[0, y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn figure_palette(speaker: usize) -> ([u8; 3], [u8; 3]) {
    let mut rng = CounterRng::labeled(speaker as u64, "figure");
    let skin = [
        (180.0 + 60.0 * rng.uniform()) as u8,
        (130.0 + 60.0 * rng.uniform()) as u8,
        (90.0 + 60.0 * rng.uniform()) as u8,
    ];
    let cloth = [
        (255.0 * rng.uniform()) as u8,
        (255.0 * rng.uniform()) as u8,
        (255.0 * rng.uniform()) as u8,
    ];
    (skin, cloth)
}

/// Appearance video: backdrop plus a thick figure with a head disc and a
/// visible mouth.
pub fn render_appearance_video(
    poses: &PoseSequence,
    layout: &KeypointLayout,
    speaker: usize,
    h: usize,
    w: usize,
) -> Result<Video> {
    check_size(h, w)?;
    if poses.channels() != layout.total_channels {
        return Err(MmgtError::shape("poses do not match the layout"));
    }
    let bg = background_texture(speaker, h, w);
    let (skin, cloth) = figure_palette(speaker);
    let edges = skeleton_edges(layout);
    let mut video = Video::black(poses.frames(), h, w, poses.fps);
    let scale = (w.min(h) as i64 / 32).max(1);
    for n in 0..poses.frames() {
        video
            .data
            .slice_mut(ndarray::s![n, .., .., ..])
            .assign(&bg.slice(ndarray::s![0, .., .., ..]));
        let frame = poses.data.slice(ndarray::s![n, .., ..]);
        let mut canvas = Canvas {
            buf: video.data.slice_mut(ndarray::s![n, .., .., ..]),
            h: h as i64,
            w: w as i64,
        };
        if let Some(&head) = layout.face.first() {
            if let Some((x, y)) = pixel(frame[[head, 0]], frame[[head, 1]], h, w) {
                canvas.disc(x, y + scale, 3 * scale, skin);
            }
        }
        draw_skeleton(&mut canvas, frame, layout, &edges, scale / 2, scale / 2, |k| {
            if layout.lips.contains(&k) {
                [120, 20, 30]
            } else if layout.face.contains(&k) {
                [40, 30, 30]
            } else if layout.left_hand.contains(&k) || layout.right_hand.contains(&k) {
                skin
            } else {
                cloth
            }
        });
    }
    Ok(video)
}
