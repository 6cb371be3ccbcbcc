//! The run configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};

use mmgt::data::SyntheticCorpusConfig;
use mmgt::formats::{read_json, write_json};
use mmgt::metrics::AutoencoderConfig;
use mmgt::schedule::ScheduleConfig;
use mmgt::smga::{SmgaConfig, SmgaTrainConfig};
use mmgt::videogen::{VideoGenConfig, VideoTrainConfig};
use mmgt::{MmgtError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Clips at the end of the corpus held out from Stage I training.
    pub held_out: usize,
    pub diversity_pairs: usize,
    pub autoencoder: AutoencoderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out: 64,
            diversity_pairs: 1000,
            autoencoder: AutoencoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoDataConfig {
    /// Number of corpus clips the video stage trains on.
    pub clips: usize,
    /// First frame of the training window inside each clip.
    pub window_start: usize,
    pub speaker: usize,
}

impl Default for VideoDataConfig {
    fn default() -> Self {
        Self {
            clips: 4,
            window_start: 0,
            speaker: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// `[lambda_f, lambda_b]` pairs.
    pub ratios: Vec<[f64; 2]>,
    pub steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![[1.0, 1.0], [1.0, 2.0], [1.0, 3.0], [1.0, 4.0]],
            steps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub smga_steps: usize,
    pub video_steps: usize,
    /// Training clips sampled and scored by the video stage.
    pub video_eval_clips: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: mmgt::ablation::VARIANTS.iter().map(|s| s.to_string()).collect(),
            smga_steps: 300,
            video_steps: 200,
            video_eval_clips: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: SyntheticCorpusConfig,
    pub schedule: ScheduleConfig,
    pub smga: SmgaConfig,
    pub smga_train: SmgaTrainConfig,
    pub videogen: VideoGenConfig,
    pub video_train: VideoTrainConfig,
    pub video_data: VideoDataConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ablation: AblationConfig,
    /// Steps between checkpoints during training.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: SyntheticCorpusConfig::default(),
            schedule: ScheduleConfig::default(),
            smga: SmgaConfig::default(),
            smga_train: SmgaTrainConfig {
                batch_size: 64,
                ..Default::default()
            },
            videogen: VideoGenConfig::default(),
            video_train: VideoTrainConfig {
                learning_rate: 2e-3,
                batch_size: 1,
                ..Default::default()
            },
            video_data: VideoDataConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            ablation: AblationConfig::default(),
            checkpoint_every: 250,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// A configuration small enough to train both stages in about a minute.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.corpus.num_clips = 160;
        cfg.eval.held_out = 32;
        cfg.eval.autoencoder.epochs = 15;
        cfg.eval.diversity_pairs = 200;
        cfg.smga_train.steps = 150;
        cfg.smga_train.batch_size = 32;
        cfg.video_train.steps = 100;
        cfg.sweep.steps = 100;
        cfg.ablation.smga_steps = 100;
        cfg.ablation.video_steps = 40;
        cfg.ablation.video_eval_clips = 1;
        cfg.checkpoint_every = 50;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.smga.validate()?;
        self.videogen.validate()?;
        self.smga_train.loss_weights.validate()?;
        let layout = self.corpus.layout();
        if layout != self.smga.layout {
            return Err(MmgtError::InvalidArgument(
                "smga.layout must match the corpus keypoint layout".into(),
            ));
        }
        if self.corpus.audio_dim != self.smga.audio_dim || self.corpus.audio_dim != self.videogen.audio_dim {
            return Err(MmgtError::InvalidArgument(
                "corpus.audio_dim, smga.audio_dim and videogen.audio_dim must agree".into(),
            ));
        }
        if self.corpus.image_size != self.videogen.image_size {
            return Err(MmgtError::InvalidArgument(
                "corpus.image_size must equal videogen.image_size".into(),
            ));
        }
        if self.corpus.frames_per_clip > self.smga.max_frames {
            return Err(MmgtError::InvalidArgument(format!(
                "clips of {} frames exceed smga.max_frames {}",
                self.corpus.frames_per_clip, self.smga.max_frames
            )));
        }
        if self.video_data.window_start + self.videogen.clip_len > self.corpus.frames_per_clip {
            return Err(MmgtError::InvalidArgument(
                "video window runs past the end of the corpus clips".into(),
            ));
        }
        if self.video_data.clips == 0 || self.video_data.clips > self.corpus.num_clips {
            return Err(MmgtError::InvalidArgument("video_data.clips must be in 1..=corpus.num_clips".into()));
        }
        if self.eval.held_out < 2 || self.eval.held_out >= self.corpus.num_clips {
            return Err(MmgtError::InvalidArgument(
                "eval.held_out must be at least 2 and leave training clips".into(),
            ));
        }
        if self.video_data.speaker >= self.videogen.num_speakers {
            return Err(MmgtError::InvalidArgument("video_data.speaker out of range".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(MmgtError::InvalidArgument("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            cfg.validate().unwrap();
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
        let empty: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, RunConfig::default());
        let partial: RunConfig = serde_json::from_str(r#"{"smga": {"model_dim": 32}}"#).unwrap();
        assert_eq!(partial.smga.model_dim, 32);
        assert_eq!(partial.smga.num_heads, SmgaConfig::default().num_heads);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"smga": {"dim": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sweep": {"ratio": []}}"#).is_err());
    }
}
