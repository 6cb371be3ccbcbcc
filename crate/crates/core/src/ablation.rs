//! Ablation variants as named strategies. Each variant edits the stage
//! configs and may rewrite the motion masks fed to the video stage.

use std::sync::Arc;

use crate::maskgen::{MaskVideo, MotionMasks, MASK_ON};
use crate::registry::Registry;
use crate::smga::SmgaConfig;
use crate::videogen::VideoGenConfig;

pub trait Ablation: Send + Sync {
    fn name(&self) -> &'static str;
    fn describe(&self) -> &'static str;
    fn configure(&self, _smga: &mut SmgaConfig, _video: &mut VideoGenConfig) {}
    fn masks(&self, masks: MotionMasks) -> MotionMasks {
        masks
    }
}

pub struct Base;

impl Ablation for Base {
    fn name(&self) -> &'static str {
        "base"
    }
    fn describe(&self) -> &'static str {
        "full model"
    }
}

pub struct NoFilm;

impl Ablation for NoFilm {
    fn name(&self) -> &'static str {
        "no_film"
    }
    fn describe(&self) -> &'static str {
        "motion blocks skip FiLM modulation"
    }
    fn configure(&self, smga: &mut SmgaConfig, _video: &mut VideoGenConfig) {
        smga.use_film = false;
    }
}

/// Every region mask is all-on, so each adapter sees the whole hidden state
/// and no spatial routing happens.
pub struct NoMotionMask;

impl Ablation for NoMotionMask {
    fn name(&self) -> &'static str {
        "no_motion_mask"
    }
    fn describe(&self) -> &'static str {
        "region masks replaced by full-frame masks"
    }
    fn masks(&self, masks: MotionMasks) -> MotionMasks {
        let full = |m: MaskVideo| MaskVideo {
            data: m.data.mapv(|_| MASK_ON),
            region: m.region,
        };
        MotionMasks {
            face: full(masks.face),
            lips: full(masks.lips),
            hands: full(masks.hands),
            face_hands: full(masks.face_hands),
            background: full(masks.background),
        }
    }
}

pub struct StillMask;

impl Ablation for StillMask {
    fn name(&self) -> &'static str {
        "still_mask"
    }
    fn describe(&self) -> &'static str {
        "frame-0 masks repeated over the clip"
    }
    fn masks(&self, masks: MotionMasks) -> MotionMasks {
        MotionMasks {
            face: masks.face.still(),
            lips: masks.lips.still(),
            hands: masks.hands.still(),
            face_hands: masks.face_hands.still(),
            background: masks.background.still(),
        }
    }
}

pub struct NoAudio;

impl Ablation for NoAudio {
    fn name(&self) -> &'static str {
        "no_audio"
    }
    fn describe(&self) -> &'static str {
        "audio replaced by learned null embeddings in both stages"
    }
    fn configure(&self, smga: &mut SmgaConfig, video: &mut VideoGenConfig) {
        smga.use_audio = false;
        video.use_audio = false;
    }
}

/// Names usable with the ablation harness; `base` is the reference row.
pub fn ablations() -> Registry<dyn Ablation> {
    let mut r: Registry<dyn Ablation> = Registry::new("ablation variant");
    let all: [Arc<dyn Ablation>; 5] = [
        Arc::new(Base),
        Arc::new(NoFilm),
        Arc::new(NoMotionMask),
        Arc::new(StillMask),
        Arc::new(NoAudio),
    ];
    for a in all {
        r.register(a.name(), a);
    }
    r
}

pub const VARIANTS: [&str; 4] = ["no_film", "no_motion_mask", "still_mask", "no_audio"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, SyntheticCorpusConfig};
    use crate::maskgen::motion_masks;
    use crate::pose::KeypointLayout;

    fn masks() -> MotionMasks {
        let cfg = SyntheticCorpusConfig {
            frames_per_clip: 6,
            render: false,
            ..Default::default()
        };
        let clip = generate_clip(&cfg, 3).unwrap();
        motion_masks(&clip.poses, &KeypointLayout::toy16(), 32, 32).unwrap()
    }

    #[test]
    fn registry_lists_all_variants() {
        let r = ablations();
        for v in VARIANTS {
            assert_eq!(r.get(v).unwrap().name(), v);
        }
        assert!(r.get("no_such").is_err());
    }

    #[test]
    fn still_mask_frames_are_identical() {
        let m = ablations().get("still_mask").unwrap().masks(masks());
        for f in 1..m.face_hands.frames() {
            assert_eq!(m.face_hands.data.index_axis(ndarray::Axis(0), f), m.face_hands.data.index_axis(ndarray::Axis(0), 0));
            assert_eq!(m.lips.data.index_axis(ndarray::Axis(0), f), m.lips.data.index_axis(ndarray::Axis(0), 0));
        }
    }

    #[test]
    fn config_toggles() {
        let r = ablations();
        let (mut s, mut v) = (SmgaConfig::default(), VideoGenConfig::default());
        r.get("no_audio").unwrap().configure(&mut s, &mut v);
        assert!(!s.use_audio && !v.use_audio && s.use_film);
        r.get("no_film").unwrap().configure(&mut s, &mut v);
        assert!(!s.use_film);
        let full = r.get("no_motion_mask").unwrap().masks(masks());
        assert!(full.background.data.iter().all(|&x| x == MASK_ON));
    }
}
