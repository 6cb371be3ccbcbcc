//! Two-stage co-speech gesture video generation at desk scale.
//!
//! Stage one ([`smga`]) denoises pose sequences conditioned on audio and an
//! initial pose, with separate face and body branches. [`maskgen`] turns the
//! poses into per-region motion masks. Stage two ([`videogen`]) is a latent
//! video denoiser that uses the masks to route audio attention to the face,
//! hands, lips and background separately.

pub mod ablation;
pub mod audio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod formats;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod nn;
pub mod pose;
pub mod render;
pub mod registry;
pub mod rng;
pub mod schedule;
pub mod smga;
pub mod videogen;

pub use error::{MmgtError, Result};
