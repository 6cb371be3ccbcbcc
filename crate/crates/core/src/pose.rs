//! Pose-domain types shared by both stages: keypoint layouts, pose and audio
//! sequences, channel masks, and the noising / initial-pose conditioning
//! primitives.

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::rng::CounterRng;

/// Named channel-index sets over a `total_channels` keypoint skeleton.
///
/// `face` and `body` partition the channels; `lips` lives inside `face` and
/// the two hands inside `body`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointLayout {
    pub total_channels: usize,
    pub face: Vec<usize>,
    pub body: Vec<usize>,
    pub lips: Vec<usize>,
    pub left_hand: Vec<usize>,
    pub right_hand: Vec<usize>,
    /// Whether the confidence coordinate takes part in the noising and losses.
    #[serde(default)]
    pub trainable_confidence: bool,
}

fn check_sorted_unique(name: &str, set: &[usize], total: usize) -> Result<()> {
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MmgtError::LayoutViolation(format!(
            "{name} indices must be sorted and duplicate-free"
        )));
    }
    if let Some(&last) = set.last() {
        if last >= total {
            return Err(MmgtError::LayoutViolation(format!(
                "{name} index {last} out of range for {total} channels"
            )));
        }
    }
    Ok(())
}

fn is_subset(sub: &[usize], sup: &[usize]) -> bool {
    sub.iter().all(|i| sup.binary_search(i).is_ok())
}

impl KeypointLayout {
    pub fn validate(&self) -> Result<()> {
        if self.total_channels == 0 {
            return Err(MmgtError::LayoutViolation("total_channels must be positive".into()));
        }
        let total = self.total_channels;
        check_sorted_unique("face", &self.face, total)?;
        check_sorted_unique("body", &self.body, total)?;
        check_sorted_unique("lips", &self.lips, total)?;
        check_sorted_unique("left_hand", &self.left_hand, total)?;
        check_sorted_unique("right_hand", &self.right_hand, total)?;
        if self.face.len() + self.body.len() != total {
            return Err(MmgtError::LayoutViolation(format!(
                "face ({}) and body ({}) must cover all {total} channels",
                self.face.len(),
                self.body.len()
            )));
        }
        if self.face.iter().any(|i| self.body.binary_search(i).is_ok()) {
            return Err(MmgtError::LayoutViolation("face and body overlap".into()));
        }
        if !is_subset(&self.lips, &self.face) {
            return Err(MmgtError::LayoutViolation("lips must be a subset of face".into()));
        }
        if !is_subset(&self.left_hand, &self.body) || !is_subset(&self.right_hand, &self.body) {
            return Err(MmgtError::LayoutViolation("hands must be a subset of body".into()));
        }
        Ok(())
    }

    /// Builds a layout where `body` is the complement of `face`.
    pub fn from_face(
        total_channels: usize,
        face: Vec<usize>,
        lips: Vec<usize>,
        left_hand: Vec<usize>,
        right_hand: Vec<usize>,
    ) -> Result<Self> {
        let body = (0..total_channels).filter(|c| !face.contains(c)).collect();
        let layout = Self {
            total_channels,
            face,
            body,
            lips,
            left_hand,
            right_hand,
            trainable_confidence: false,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// 134-keypoint whole-body skeleton: 18 body joints, 6 foot points,
    /// 68 face landmarks (mouth at landmarks 48..68) and 21 points per hand.
    pub fn wholebody134() -> Self {
        Self::from_face(
            134,
            (24..92).collect(),
            (72..92).collect(),
            (92..113).collect(),
            (113..134).collect(),
        )
        .expect("built-in layout is valid")
    }

    /// The 16-keypoint skeleton used by the synthetic corpus.
    ///
    /// 0 nose, 1/2 eyes, 3 upper lip, 4 lower lip, 5/6 mouth corners,
    /// 7 neck, 8/9 shoulders, 10/11 elbows, 12/13 wrists, 14/15 finger tips.
    pub fn toy16() -> Self {
        Self::from_face(
            16,
            (0..7).collect(),
            vec![3, 4, 5, 6],
            vec![12, 14],
            vec![13, 15],
        )
        .expect("built-in layout is valid")
    }

    pub fn hands(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self
            .left_hand
            .iter()
            .chain(self.right_hand.iter())
            .copied()
            .collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// Number of coordinates per keypoint that are modelled (2 or 3).
    pub fn modelled_coords(&self) -> usize {
        if self.trainable_confidence {
            3
        } else {
            2
        }
    }
}

/// `N x Cp x 3` keypoints: normalised x, y (top-left origin, y down) and
/// detector confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub data: Array3<f32>,
    pub fps: f32,
}

impl PoseSequence {
    pub fn new(data: Array3<f32>, fps: f32) -> Result<Self> {
        let (n, _, k) = data.dim();
        if n == 0 {
            return Err(MmgtError::shape("pose sequence needs at least one frame"));
        }
        if k != 3 {
            return Err(MmgtError::shape(format!(
                "pose sequence last axis must be 3 (x, y, conf), got {k}"
            )));
        }
        Ok(Self { data, fps })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn frame(&self, n: usize) -> Array2<f32> {
        self.data.index_axis(Axis(0), n).to_owned()
    }

    /// Frames `window.start_frame .. window.start_frame + window.length`.
    pub fn window(&self, window: ClipWindow) -> Result<Self> {
        if window.start_frame + window.length > self.frames() || window.length == 0 {
            return Err(MmgtError::invalid(format!(
                "window {window:?} outside {} frames",
                self.frames()
            )));
        }
        let end = window.start_frame + window.length;
        Self::new(self.data.slice(s![window.start_frame..end, .., ..]).to_owned(), self.fps)
    }

    /// Elementwise sum, used to realise `x_t = x'_t + R(p0)`.
    pub fn add(&self, other: &PoseSequence) -> Result<Self> {
        if self.data.dim() != other.data.dim() {
            return Err(MmgtError::shape(format!(
                "cannot add poses {:?} and {:?}",
                self.data.dim(),
                other.data.dim()
            )));
        }
        Self::new(&self.data + &other.data, self.fps)
    }
}

/// `N x Da` per-frame audio embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub data: Array2<f32>,
    pub fps: f32,
}

impl AudioFeatureSequence {
    pub fn new(data: Array2<f32>, fps: f32) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(MmgtError::shape("audio features must be non-empty"));
        }
        Ok(Self { data, fps })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn window(&self, window: ClipWindow) -> Result<Self> {
        if window.start_frame + window.length > self.frames() || window.length == 0 {
            return Err(MmgtError::invalid(format!(
                "window {window:?} outside {} frames",
                self.frames()
            )));
        }
        let end = window.start_frame + window.length;
        Self::new(self.data.slice(s![window.start_frame..end, ..]).to_owned(), self.fps)
    }

    /// Reorders frames: `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.frames() {
            return Err(MmgtError::shape("permutation length differs from frame count"));
        }
        let mut out = self.data.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).assign(&self.data.row(p));
        }
        Self::new(out, self.fps)
    }
}

/// Binary per-channel mask, broadcast over frames and coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    pub values: Vec<u8>,
}

impl SpatialMask {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn active(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub start_frame: usize,
    pub length: usize,
}

/// Face and body channel masks `(M^f, M^b)` with `M^b = 1 - M^f`.
pub fn make_spatial_masks(layout: &KeypointLayout) -> Result<(SpatialMask, SpatialMask)> {
    layout.validate()?;
    let mut face = vec![0u8; layout.total_channels];
    for &c in &layout.face {
        face[c] = 1;
    }
    let face = SpatialMask { values: face };
    let body = face.complement();
    Ok((face, body))
}

pub fn apply_spatial_mask(x: &PoseSequence, mask: &SpatialMask) -> Result<PoseSequence> {
    if mask.len() != x.channels() {
        return Err(MmgtError::shape(format!(
            "mask has {} channels, poses have {}",
            mask.len(),
            x.channels()
        )));
    }
    let mut out = x.data.clone();
    for (c, &m) in mask.values.iter().enumerate() {
        if m == 0 {
            out.slice_mut(s![.., c, ..]).fill(0.0);
        }
    }
    PoseSequence::new(out, x.fps)
}

/// `x0 + N(0, sigma^2)` on the x, y coordinates; confidence is untouched.
pub fn add_pose_noise(x0: &PoseSequence, sigma: f64, seed: u64) -> Result<PoseSequence> {
    if !(sigma >= 0.0) {
        return Err(MmgtError::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = x0.data.clone();
    if sigma == 0.0 {
        return PoseSequence::new(out, x0.fps);
    }
    let mut rng = CounterRng::labeled(seed, "pose-noise");
    for mut kp in out.lanes_mut(Axis(2)) {
        kp[0] += (sigma * rng.normal()) as f32;
        kp[1] += (sigma * rng.normal()) as f32;
    }
    PoseSequence::new(out, x0.fps)
}

/// `R(p0)`: the single-frame pose repeated `n` times along time.
pub fn repeat_initial_pose(p0: &Array2<f32>, n: usize, fps: f32) -> Result<PoseSequence> {
    if n < 1 {
        return Err(MmgtError::invalid("repeat count must be >= 1"));
    }
    if p0.ncols() != 3 {
        return Err(MmgtError::shape("initial pose must be Cp x 3"));
    }
    let data = p0
        .view()
        .insert_axis(Axis(0))
        .broadcast((n, p0.nrows(), 3))
        .expect("broadcast of a leading unit axis")
        .to_owned();
    PoseSequence::new(data, fps)
}

/// All fully contained windows of `length` frames at stride `step`.
pub fn clip_windows(length: usize, step: usize, total: usize) -> Vec<ClipWindow> {
    if length == 0 || step == 0 || length > total {
        return Vec::new();
    }
    (0..=total - length)
        .step_by(step)
        .map(|start_frame| ClipWindow { start_frame, length })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_pose(n: usize, cp: usize, seed: u64) -> PoseSequence {
        let mut rng = CounterRng::new(seed, 0);
        let data = Array3::from_shape_fn((n, cp, 3), |_| rng.uniform() as f32);
        PoseSequence::new(data, 25.0).unwrap()
    }

    fn tiny_layout() -> KeypointLayout {
        KeypointLayout {
            total_channels: 4,
            face: vec![0, 1],
            body: vec![2, 3],
            lips: vec![1],
            left_hand: vec![2],
            right_hand: vec![3],
            trainable_confidence: false,
        }
    }

    #[test]
    fn spatial_masks_indicator() {
        let (f, b) = make_spatial_masks(&tiny_layout()).unwrap();
        assert_eq!(f.values, vec![1, 1, 0, 0]);
        assert_eq!(b.values, vec![0, 0, 1, 1]);
    }

    #[test]
    fn empty_face_gives_zero_mask() {
        let layout = KeypointLayout {
            total_channels: 3,
            face: vec![],
            body: vec![0, 1, 2],
            lips: vec![],
            left_hand: vec![],
            right_hand: vec![],
            trainable_confidence: false,
        };
        let (f, b) = make_spatial_masks(&layout).unwrap();
        assert_eq!(f.values, vec![0, 0, 0]);
        assert_eq!(b.values, vec![1, 1, 1]);
    }

    #[test]
    fn wholebody_face_count() {
        let layout = KeypointLayout::wholebody134();
        let (f, _) = make_spatial_masks(&layout).unwrap();
        assert_eq!(f.active(), layout.face.len());
        assert_eq!(f.active(), 68);
    }

    #[test]
    fn invalid_layouts_rejected() {
        let mut l = tiny_layout();
        l.body = vec![1, 2, 3];
        assert!(matches!(l.validate(), Err(MmgtError::LayoutViolation(_))));
        let mut l = tiny_layout();
        l.lips = vec![2];
        assert!(l.validate().is_err());
        let mut l = tiny_layout();
        l.face = vec![1, 0];
        assert!(l.validate().is_err());
        let mut l = tiny_layout();
        l.left_hand = vec![0];
        assert!(l.validate().is_err());
        let mut l = tiny_layout();
        l.body = vec![2];
        assert!(make_spatial_masks(&l).is_err());
    }

    #[test]
    fn mask_identity_and_zero() {
        let x = random_pose(5, 4, 1);
        let ones = SpatialMask { values: vec![1; 4] };
        let zeros = SpatialMask { values: vec![0; 4] };
        assert_eq!(apply_spatial_mask(&x, &ones).unwrap(), x);
        let z = apply_spatial_mask(&x, &zeros).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(apply_spatial_mask(&x, &SpatialMask { values: vec![1; 3] }).is_err());
    }

    #[test]
    fn noise_zero_sigma_and_determinism() {
        let x = random_pose(4, 4, 2);
        assert_eq!(add_pose_noise(&x, 0.0, 5).unwrap(), x);
        assert_eq!(add_pose_noise(&x, 0.3, 5).unwrap(), add_pose_noise(&x, 0.3, 5).unwrap());
        assert!(add_pose_noise(&x, -1.0, 5).is_err());
    }

    #[test]
    fn noise_leaves_confidence() {
        let x = random_pose(4, 4, 2);
        let y = add_pose_noise(&x, 0.5, 1).unwrap();
        for n in 0..4 {
            for c in 0..4 {
                assert_eq!(x.data[[n, c, 2]], y.data[[n, c, 2]]);
            }
        }
    }

    #[test]
    fn noise_unit_sigma_monte_carlo() {
        // 500k keypoints x 2 coordinates = 1e6 noise samples.
        let x = PoseSequence::new(Array3::zeros((1000, 500, 3)), 25.0).unwrap();
        let y = add_pose_noise(&x, 1.0, 11).unwrap();
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut count = 0usize;
        for kp in y.data.lanes(Axis(2)) {
            for &v in &[kp[0], kp[1]] {
                sum += v as f64;
                sq += (v as f64).powi(2);
                count += 1;
            }
        }
        assert_eq!(count, 1_000_000);
        let mean = sum / count as f64;
        let std = (sq / count as f64 - mean * mean).sqrt();
        assert!((0.99..=1.01).contains(&std), "std {std}");
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn repeat_initial_pose_copies() {
        let p0 = random_pose(1, 4, 3).frame(0);
        let r1 = repeat_initial_pose(&p0, 1, 25.0).unwrap();
        assert_eq!(r1.frames(), 1);
        let r = repeat_initial_pose(&p0, 12, 25.0).unwrap();
        for n in 0..12 {
            assert_eq!(r.frame(n), p0);
        }
        assert!(repeat_initial_pose(&p0, 0, 25.0).is_err());
    }

    #[test]
    fn conditioning_composition() {
        let x0 = random_pose(6, 4, 4);
        let p0 = x0.frame(0);
        let xt = add_pose_noise(&x0, 0.0, 1)
            .unwrap()
            .add(&repeat_initial_pose(&p0, 6, 25.0).unwrap())
            .unwrap();
        for n in 0..6 {
            for c in 0..4 {
                for k in 0..3 {
                    assert_eq!(xt.data[[n, c, k]], x0.data[[n, c, k]] + p0[[c, k]]);
                }
            }
        }
    }

    #[test]
    fn clip_window_examples() {
        assert_eq!(clip_windows(10, 1, 10).len(), 1);
        let starts: Vec<usize> = clip_windows(8, 4, 20).iter().map(|w| w.start_frame).collect();
        assert_eq!(starts, vec![0, 4, 8, 12]);
        assert!(clip_windows(8, 1, 5).is_empty());
    }

    proptest! {
        #[test]
        fn masked_split_is_lossless(seed in 0u64..1000, n in 1usize..6) {
            let layout = KeypointLayout::toy16();
            let x = random_pose(n, 16, seed);
            let (f, b) = make_spatial_masks(&layout).unwrap();
            let xf = apply_spatial_mask(&x, &f).unwrap();
            let xb = apply_spatial_mask(&x, &b).unwrap();
            prop_assert_eq!(&xf.data + &xb.data, x.data.clone());
            for (a, c) in f.values.iter().zip(&b.values) {
                prop_assert_eq!(a + c, 1);
            }
        }

        #[test]
        fn windows_stay_in_bounds(length in 1usize..30, step in 1usize..10, total in 0usize..80) {
            let ws = clip_windows(length, step, total);
            for w in &ws {
                prop_assert!(w.start_frame + w.length <= total);
            }
            for pair in ws.windows(2) {
                prop_assert_eq!(pair[1].start_frame - pair[0].start_frame, step);
            }
            if length <= total {
                // maximal: one more step would leave the sequence
                let last = ws.last().unwrap().start_frame;
                prop_assert!(last + step + length > total);
            }
        }
    }
}
