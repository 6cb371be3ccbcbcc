//! Motion masks from keypoint bounding boxes, mask algebra, and the blurred
//! multi-resolution pyramid fed to the video stage.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::pose::{KeypointLayout, PoseSequence};

pub const MASK_ON: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    #[serde(rename = "face")]
    Face,
    #[serde(rename = "lips")]
    Lips,
    #[serde(rename = "hands")]
    Hands,
    #[serde(rename = "face+hands")]
    FaceHands,
    #[serde(rename = "background")]
    Background,
}

impl RegionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionTag::Face => "face",
            RegionTag::Lips => "lips",
            RegionTag::Hands => "hands",
            RegionTag::FaceHands => "face+hands",
            RegionTag::Background => "background",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            RegionTag::FaceHands => "face_hands",
            other => other.as_str(),
        }
    }
}

/// `N x H x W` binary mask video with values in {0, 255}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVideo {
    pub data: Array3<u8>,
    pub region: RegionTag,
}

impl MaskVideo {
    pub fn zeros(frames: usize, height: usize, width: usize, region: RegionTag) -> Self {
        Self {
            data: Array3::zeros((frames, height, width)),
            region,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0 || v == MASK_ON)
    }

    pub fn active_pixels(&self, frame: usize) -> usize {
        self.data
            .index_axis(Axis(0), frame)
            .iter()
            .filter(|&&v| v == MASK_ON)
            .count()
    }

    /// Every frame replaced by frame 0 (the "still mask" ablation).
    pub fn still(&self) -> Self {
        let first = self.data.slice(s![0..1, .., ..]);
        Self {
            data: first
                .broadcast(self.data.dim())
                .expect("leading unit axis broadcasts")
                .to_owned(),
            region: self.region,
        }
    }
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(MmgtError::invalid(format!(
            "mask size must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Bounding-box mask of one keypoint region, frame by frame.
///
/// Normalised coordinates are truncated to pixels (`int(x * W)`); pixels with
/// `x <= 0` or `y <= 0` are ignored. A frame whose box is degenerate in either
/// axis stays empty. The filled box is half-open: rows `[min_y, max_y)`,
/// columns `[min_x, max_x)`.
pub fn region_mask(
    poses: &PoseSequence,
    region: &[usize],
    height: usize,
    width: usize,
    tag: RegionTag,
) -> Result<MaskVideo> {
    check_size(height, width)?;
    if region.is_empty() {
        return Err(MmgtError::invalid("region index set is empty"));
    }
    if let Some(&c) = region.iter().find(|&&c| c >= poses.channels()) {
        return Err(MmgtError::shape(format!(
            "region index {c} out of range for {} keypoints",
            poses.channels()
        )));
    }
    let mut out = MaskVideo::zeros(poses.frames(), height, width, tag);
    let (wf, hf) = (width as f32, height as f32);
    for (t, frame) in poses.data.axis_iter(Axis(0)).enumerate() {
        let (mut min_x, mut min_y) = (width as i64, height as i64);
        let (mut max_x, mut max_y) = (0i64, 0i64);
        for &c in region {
            let x = (frame[[c, 0]] * wf) as i64;
            let y = (frame[[c, 1]] * hf) as i64;
            if x > 0 && y > 0 {
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
        if min_x < max_x && min_y < max_y {
            let (y0, y1) = (min_y as usize, (max_y as usize).min(height));
            let (x0, x1) = (min_x as usize, (max_x as usize).min(width));
            if y0 < y1 && x0 < x1 {
                out.data.slice_mut(s![t, y0..y1, x0..x1]).fill(MASK_ON);
            }
        }
    }
    Ok(out)
}

/// Pixelwise union (max) of two masks.
pub fn combine_masks(a: &MaskVideo, b: &MaskVideo) -> Result<MaskVideo> {
    if a.data.dim() != b.data.dim() {
        return Err(MmgtError::shape(format!(
            "cannot combine masks {:?} and {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let mut data = a.data.clone();
    data.zip_mut_with(&b.data, |x, &y| *x = (*x).max(y));
    let region = match (a.region, b.region) {
        (x, y) if x == y => x,
        (RegionTag::Face | RegionTag::Hands | RegionTag::FaceHands, RegionTag::Face | RegionTag::Hands | RegionTag::FaceHands) => {
            RegionTag::FaceHands
        }
        (x, _) => x,
    };
    Ok(MaskVideo { data, region })
}

/// `255 - fh` for a binary face+hands mask.
pub fn background_mask(fh: &MaskVideo) -> Result<MaskVideo> {
    if !fh.is_binary() {
        return Err(MmgtError::invalid("background mask needs a binary 0/255 input"));
    }
    Ok(MaskVideo {
        data: fh.data.mapv(|v| MASK_ON - v),
        region: RegionTag::Background,
    })
}

/// The masks consumed downstream, all derived from one pose sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMasks {
    pub face: MaskVideo,
    pub lips: MaskVideo,
    pub hands: MaskVideo,
    pub face_hands: MaskVideo,
    pub background: MaskVideo,
}

fn region_or_empty(
    poses: &PoseSequence,
    region: &[usize],
    height: usize,
    width: usize,
    tag: RegionTag,
) -> Result<MaskVideo> {
    if region.is_empty() {
        Ok(MaskVideo::zeros(poses.frames(), height, width, tag))
    } else {
        region_mask(poses, region, height, width, tag)
    }
}

/// Face, lips and per-hand boxes; hands are boxed separately and unioned.
pub fn motion_masks(
    poses: &PoseSequence,
    layout: &KeypointLayout,
    height: usize,
    width: usize,
) -> Result<MotionMasks> {
    check_size(height, width)?;
    if poses.channels() != layout.total_channels {
        return Err(MmgtError::shape(format!(
            "poses have {} keypoints, layout expects {}",
            poses.channels(),
            layout.total_channels
        )));
    }
    let face = region_or_empty(poses, &layout.face, height, width, RegionTag::Face)?;
    let lips = region_or_empty(poses, &layout.lips, height, width, RegionTag::Lips)?;
    let left = region_or_empty(poses, &layout.left_hand, height, width, RegionTag::Hands)?;
    let right = region_or_empty(poses, &layout.right_hand, height, width, RegionTag::Hands)?;
    let hands = combine_masks(&left, &right)?;
    let face_hands = combine_masks(&face, &hands)?;
    let background = background_mask(&face_hands)?;
    Ok(MotionMasks {
        face,
        lips,
        hands,
        face_hands,
        background,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
}

impl PyramidLevel {
    /// Three levels at 1x, 1/2x and 1/4x of the given size with sigma 1, 2, 4.
    pub fn default_levels(height: usize, width: usize) -> Vec<PyramidLevel> {
        (0..3)
            .map(|i| PyramidLevel {
                height: (height >> i).max(1),
                width: (width >> i).max(1),
                sigma: (1 << i) as f64,
            })
            .collect()
    }
}

/// Blurred, resized masks in [0, 1], one `N x h_i x w_i` tensor per level.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<Array3<f32>>,
    pub sigmas: Vec<f64>,
}

impl MaskPyramid {
    pub fn level_for(&self, height: usize, width: usize) -> Option<&Array3<f32>> {
        self.levels.iter().find(|l| {
            let (_, h, w) = l.dim();
            h == height && w == width
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with edge replication.
fn blur(frame: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return frame.to_owned();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (h, w) = frame.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += kv * frame[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[[yy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Area-resampling weights: row `i` lists `(source index, weight)` pairs.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if src == dst {
        return (0..dst).map(|i| vec![(i, 1.0)]).collect();
    }
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

fn area_resize(frame: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = frame.dim();
    if h == height && w == width {
        return frame.clone();
    }
    let wy = area_weights(h, height);
    let wx = area_weights(w, width);
    let mut rows = Array2::<f64>::zeros((height, w));
    for (i, taps) in wy.iter().enumerate() {
        for &(j, wt) in taps {
            let src = frame.row(j);
            rows.row_mut(i).zip_mut_with(&src, |d, &s| *d += wt * s);
        }
    }
    let mut out = Array2::<f64>::zeros((height, width));
    for y in 0..height {
        for (i, taps) in wx.iter().enumerate() {
            out[[y, i]] = taps.iter().map(|&(j, wt)| wt * rows[[y, j]]).sum();
        }
    }
    out
}

/// Gaussian blur (radius `ceil(3 sigma)`), area resampling, then scaling to
/// [0, 1]. Each level is computed from the full-resolution mask.
pub fn mask_pyramid(mask: &MaskVideo, levels: &[PyramidLevel]) -> Result<MaskPyramid> {
    if levels.is_empty() {
        return Err(MmgtError::invalid("mask pyramid needs at least one level"));
    }
    for l in levels {
        if l.height == 0 || l.width == 0 || !(l.sigma >= 0.0) {
            return Err(MmgtError::invalid(format!("invalid pyramid level {l:?}")));
        }
    }
    if levels
        .windows(2)
        .any(|p| p[1].height > p[0].height || p[1].width > p[0].width || (p[1].height == p[0].height && p[1].width == p[0].width))
    {
        return Err(MmgtError::invalid("pyramid level sizes must strictly decrease"));
    }
    let n = mask.frames();
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let mut arr = Array3::<f32>::zeros((n, level.height, level.width));
        for t in 0..n {
            let frame = mask.data.index_axis(Axis(0), t).mapv(|v| v as f64);
            let blurred = blur(frame.view(), level.sigma);
            let resized = area_resize(&blurred, level.height, level.width);
            arr.index_axis_mut(Axis(0), t)
                .assign(&resized.mapv(|v| (v / MASK_ON as f64).clamp(0.0, 1.0) as f32));
        }
        out.push(arr);
    }
    Ok(MaskPyramid {
        levels: out,
        sigmas: levels.iter().map(|l| l.sigma).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    fn poses_from(points: &[(f32, f32)]) -> PoseSequence {
        let mut data = Array3::<f32>::zeros((1, points.len(), 3));
        for (i, &(x, y)) in points.iter().enumerate() {
            data[[0, i, 0]] = x;
            data[[0, i, 1]] = y;
            data[[0, i, 2]] = 1.0;
        }
        PoseSequence::new(data, 25.0).unwrap()
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn single_keypoint_is_degenerate() {
        let p = poses_from(&[(0.5, 0.5)]);
        let m = region_mask(&p, &[0], 32, 32, RegionTag::Face).unwrap();
        assert_eq!(m.active_pixels(0), 0);
    }

    #[test]
    fn invalid_keypoints_filtered() {
        let p = poses_from(&[(0.0, 0.4), (-0.2, 0.9), (0.0, 0.1)]);
        let m = region_mask(&p, &all(3), 32, 32, RegionTag::Face).unwrap();
        assert_eq!(m.active_pixels(0), 0);
    }

    #[test]
    fn three_point_box() {
        let p = poses_from(&[(0.25, 0.25), (0.75, 0.5), (0.5, 0.75)]);
        let m = region_mask(&p, &all(3), 64, 64, RegionTag::Face).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let inside = (16..48).contains(&y) && (16..48).contains(&x);
                assert_eq!(m.data[[0, y, x]], if inside { 255 } else { 0 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        let p = poses_from(&[(0.2, 0.2), (0.4, 0.4)]);
        assert!(region_mask(&p, &[0, 1], 0, 8, RegionTag::Face).is_err());
        assert!(region_mask(&p, &[], 8, 8, RegionTag::Face).is_err());
        assert!(region_mask(&p, &[5], 8, 8, RegionTag::Face).is_err());
    }

    #[test]
    fn boxes_beyond_frame_are_clipped() {
        let p = poses_from(&[(0.5, 0.5), (1.5, 1.25)]);
        let m = region_mask(&p, &[0, 1], 16, 16, RegionTag::Face).unwrap();
        assert_eq!(m.active_pixels(0), 8 * 8);
    }

    #[test]
    fn combine_identity_and_overlap_count() {
        let a = region_mask(&poses_from(&[(0.1, 0.1), (0.5, 0.5)]), &[0, 1], 40, 40, RegionTag::Face).unwrap();
        let b = region_mask(&poses_from(&[(0.3, 0.3), (0.8, 0.7)]), &[0, 1], 40, 40, RegionTag::Hands).unwrap();
        let zeros = MaskVideo::zeros(1, 40, 40, RegionTag::Hands);
        assert_eq!(combine_masks(&a, &zeros).unwrap().data, a.data);
        assert_eq!(combine_masks(&a, &a).unwrap(), a);
        let u = combine_masks(&a, &b).unwrap();
        assert_eq!(u.region, RegionTag::FaceHands);
        // a: rows/cols 4..20 -> 16x16; b: rows 12..28, cols 12..32 -> 16x20;
        // overlap rows 12..20, cols 12..20 -> 8x8.
        assert_eq!(a.active_pixels(0), 256);
        assert_eq!(b.active_pixels(0), 320);
        assert_eq!(u.active_pixels(0), 256 + 320 - 64);
        assert!(combine_masks(&a, &MaskVideo::zeros(1, 8, 8, RegionTag::Face)).is_err());
    }

    #[test]
    fn background_complements() {
        let z = MaskVideo::zeros(2, 4, 4, RegionTag::FaceHands);
        assert!(background_mask(&z).unwrap().data.iter().all(|&v| v == 255));
        let mut full = z.clone();
        full.data.fill(255);
        assert!(background_mask(&full).unwrap().data.iter().all(|&v| v == 0));
        let mut bad = z;
        bad.data[[0, 0, 0]] = 7;
        assert!(background_mask(&bad).is_err());
    }

    #[test]
    fn background_sum_identity_random() {
        let mut rng = CounterRng::new(5, 0);
        let data = Array3::from_shape_fn((3, 17, 9), |_| if rng.bernoulli(0.4) { 255u8 } else { 0 });
        let fh = MaskVideo { data, region: RegionTag::FaceHands };
        let bg = background_mask(&fh).unwrap();
        for (a, b) in fh.data.iter().zip(bg.data.iter()) {
            assert_eq!(*a as u16 + *b as u16, 255);
        }
    }

    #[test]
    fn pyramid_noop_level() {
        let m = region_mask(&poses_from(&[(0.2, 0.3), (0.6, 0.7)]), &[0, 1], 20, 24, RegionTag::Face).unwrap();
        let p = mask_pyramid(&m, &[PyramidLevel { height: 20, width: 24, sigma: 0.0 }]).unwrap();
        let expect = m.data.mapv(|v| v as f32 / 255.0);
        assert_eq!(p.levels[0], expect);
    }

    #[test]
    fn pyramid_constant_invariance() {
        let mut m = MaskVideo::zeros(2, 32, 32, RegionTag::Background);
        m.data.fill(255);
        let p = mask_pyramid(&m, &PyramidLevel::default_levels(32, 32)).unwrap();
        for level in &p.levels {
            assert!(level.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn pyramid_mass_conservation() {
        let mut m = MaskVideo::zeros(1, 64, 64, RegionTag::Face);
        m.data.slice_mut(s![0, 20..40, 16..44]).fill(255);
        let area = 20.0 * 28.0 / (64.0 * 64.0);
        let levels = [
            PyramidLevel { height: 64, width: 64, sigma: 2.0 },
            PyramidLevel { height: 32, width: 32, sigma: 2.0 },
            PyramidLevel { height: 12, width: 20, sigma: 2.0 },
        ];
        let p = mask_pyramid(&m, &levels).unwrap();
        for level in &p.levels {
            let mean = level.iter().map(|&v| v as f64).sum::<f64>() / level.len() as f64;
            assert!((mean - area).abs() / area < 0.02, "mean {mean} vs {area}");
        }
    }

    #[test]
    fn pyramid_rejects_bad_levels() {
        let m = MaskVideo::zeros(1, 8, 8, RegionTag::Face);
        assert!(mask_pyramid(&m, &[]).is_err());
        assert!(mask_pyramid(&m, &[PyramidLevel { height: 0, width: 4, sigma: 1.0 }]).is_err());
        let grow = [
            PyramidLevel { height: 4, width: 4, sigma: 1.0 },
            PyramidLevel { height: 8, width: 8, sigma: 1.0 },
        ];
        assert!(mask_pyramid(&m, &grow).is_err());
    }

    #[test]
    fn still_mask_repeats_first_frame() {
        let mut rng = CounterRng::new(8, 0);
        let data = Array3::from_shape_fn((4, 5, 5), |_| if rng.bernoulli(0.5) { 255u8 } else { 0 });
        let m = MaskVideo { data, region: RegionTag::Lips };
        let s = m.still();
        for t in 0..4 {
            assert_eq!(s.data.index_axis(Axis(0), t), m.data.index_axis(Axis(0), 0));
        }
    }

    fn random_mask(seed: u64) -> MaskVideo {
        let mut rng = CounterRng::new(seed, 3);
        let data = Array3::from_shape_fn((2, 6, 7), |_| if rng.bernoulli(0.5) { 255u8 } else { 0 });
        MaskVideo { data, region: RegionTag::Face }
    }

    proptest! {
        #[test]
        fn combine_is_a_semilattice(a in 0u64..500, b in 0u64..500, c in 0u64..500) {
            let (a, b, c) = (random_mask(a), random_mask(b), random_mask(c));
            prop_assert_eq!(combine_masks(&a, &b).unwrap(), combine_masks(&b, &a).unwrap());
            let left = combine_masks(&combine_masks(&a, &b).unwrap(), &c).unwrap();
            let right = combine_masks(&a, &combine_masks(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
            prop_assert_eq!(combine_masks(&a, &a).unwrap(), a);
        }

        #[test]
        fn adding_a_keypoint_never_shrinks(
            pts in proptest::collection::vec((0.0f32..1.0, 0.0f32..1.0), 1..8),
            extra in (0.0f32..1.0, 0.0f32..1.0),
        ) {
            let base = poses_from(&pts);
            let mut more = pts.clone();
            more.push(extra);
            let grown = poses_from(&more);
            let a = region_mask(&base, &all(pts.len()), 32, 32, RegionTag::Face).unwrap();
            let b = region_mask(&grown, &all(more.len()), 32, 32, RegionTag::Face).unwrap();
            prop_assert!(b.active_pixels(0) >= a.active_pixels(0));
            // and the old box is contained in the new one
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                prop_assert!(*x <= *y);
            }
        }

        #[test]
        fn pyramid_mean_ordered_by_area(w1 in 2usize..20, w2 in 2usize..20) {
            prop_assume!(w1 != w2);
            let mut m = MaskVideo::zeros(2, 48, 48, RegionTag::Face);
            m.data.slice_mut(s![0, 14..34, 14..14 + w1]).fill(255);
            m.data.slice_mut(s![1, 14..34, 14..14 + w2]).fill(255);
            let p = mask_pyramid(&m, &PyramidLevel::default_levels(24, 24)).unwrap();
            for level in &p.levels {
                let m0: f32 = level.index_axis(Axis(0), 0).sum();
                let m1: f32 = level.index_axis(Axis(0), 1).sum();
                prop_assert_eq!(w1 > w2, m0 > m1);
            }
        }
    }
}
