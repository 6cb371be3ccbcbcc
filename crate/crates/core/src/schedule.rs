//! Noise schedules and reverse-process samplers, each a named strategy.

use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::registry::Registry;

pub trait BetaSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    fn betas(&self, train_steps: usize) -> Vec<f64>;
}

/// Squared-cosine `alpha_bar` with offset `s = 0.008`, betas capped at 0.999.
pub struct CosineSchedule;

impl BetaSchedule for CosineSchedule {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn betas(&self, train_steps: usize) -> Vec<f64> {
        let s = 0.008;
        let f = |t: f64| ((t / train_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        (0..train_steps)
            .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
            .collect()
    }
}

/// Linear betas from 1e-4 to 0.02 at 1000 steps, rescaled for other lengths.
pub struct LinearSchedule;

impl BetaSchedule for LinearSchedule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn betas(&self, train_steps: usize) -> Vec<f64> {
        let scale = 1000.0 / train_steps as f64;
        let (lo, hi) = (scale * 1e-4, (scale * 0.02).min(0.999));
        if train_steps == 1 {
            return vec![lo];
        }
        (0..train_steps)
            .map(|i| lo + (hi - lo) * i as f64 / (train_steps - 1) as f64)
            .collect()
    }
}

pub fn beta_schedules() -> Registry<dyn BetaSchedule> {
    let mut r: Registry<dyn BetaSchedule> = Registry::new("beta schedule");
    r.register("cosine", Arc::new(CosineSchedule));
    r.register("linear", Arc::new(LinearSchedule));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_schedule: String,
    pub train_steps: usize,
    pub sampler: String,
    pub sampler_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_schedule: "cosine".into(),
            train_steps: 1000,
            sampler: "ddim".into(),
            sampler_steps: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.train_steps == 0 {
            return Err(MmgtError::invalid("train_steps must be positive"));
        }
        if config.sampler_steps == 0 || config.sampler_steps > config.train_steps {
            return Err(MmgtError::invalid(format!(
                "sampler_steps must be in 1..={}, got {}",
                config.train_steps, config.sampler_steps
            )));
        }
        samplers().get(&config.sampler)?;
        let betas = beta_schedules().get(&config.beta_schedule)?.betas(config.train_steps);
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            config,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Descending, evenly strided timesteps ending at 0.
    pub fn sampling_timesteps(&self) -> Vec<usize> {
        let n = self.config.sampler_steps;
        let ratio = self.train_steps() / n;
        (0..n).map(|i| i * ratio).rev().collect()
    }

    pub fn sampler(&self) -> Arc<dyn Sampler> {
        samplers().get(&self.config.sampler).expect("validated in new()")
    }

    /// `sqrt(ab) x0 + sqrt(1 - ab) eps`, with `ab` given per batch element.
    pub fn q_sample(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (a, b) = self.coefficients(x0, t)?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }

    /// Per-batch `sqrt(ab)` and `sqrt(1 - ab)` shaped to broadcast over `like`.
    pub fn coefficients(&self, like: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor)> {
        let rank = like.rank();
        if like.dims()[0] != t.len() {
            return Err(MmgtError::shape("one timestep per batch element is required"));
        }
        let mut shape = vec![t.len()];
        shape.extend(std::iter::repeat(1).take(rank - 1));
        let sa: Vec<f64> = t.iter().map(|&i| self.alpha_bars[i].sqrt()).collect();
        let sb: Vec<f64> = t.iter().map(|&i| (1.0 - self.alpha_bars[i]).sqrt()).collect();
        let dev = like.device();
        Ok((
            Tensor::from_vec(sa, shape.as_slice(), dev)?.to_dtype(like.dtype())?,
            Tensor::from_vec(sb, shape.as_slice(), dev)?.to_dtype(like.dtype())?,
        ))
    }

    pub fn eps_from_x0(&self, x_t: &Tensor, x0: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bars[t];
        Ok(((x_t - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }

    pub fn x0_from_eps(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.alpha_bars[t];
        Ok(((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
    }
}

/// One reverse step from `t` to `t_prev` given the model's clean-sample and
/// noise estimates. `t_prev == None` ends the chain.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;
    fn needs_noise(&self) -> bool;
    fn step(
        &self,
        schedule: &DiffusionSchedule,
        x0: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        noise: Option<&Tensor>,
    ) -> Result<Tensor>;
}

/// Deterministic DDIM (eta = 0).
pub struct Ddim;

impl Sampler for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn needs_noise(&self) -> bool {
        false
    }

    fn step(
        &self,
        schedule: &DiffusionSchedule,
        x0: &Tensor,
        eps: &Tensor,
        _t: usize,
        t_prev: Option<usize>,
        _noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        match t_prev {
            None => Ok(x0.clone()),
            Some(tp) => {
                let ab = schedule.alpha_bars[tp];
                Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
            }
        }
    }
}

/// Ancestral sampling over the strided chain (DDIM with eta = 1).
pub struct Ancestral;

impl Sampler for Ancestral {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn needs_noise(&self) -> bool {
        true
    }

    fn step(
        &self,
        schedule: &DiffusionSchedule,
        x0: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let Some(tp) = t_prev else {
            return Ok(x0.clone());
        };
        let noise = noise.ok_or_else(|| MmgtError::invalid("ancestral sampling needs noise"))?;
        let ab_t = schedule.alpha_bars[t];
        let ab_p = schedule.alpha_bars[tp];
        let var = ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0);
        let dir = (1.0 - ab_p - var).max(0.0).sqrt();
        Ok(((x0 * ab_p.sqrt())? + (eps * dir)? + (noise * var.sqrt())?)?)
    }
}

pub fn samplers() -> Registry<dyn Sampler> {
    let mut r: Registry<dyn Sampler> = Registry::new("sampler");
    r.register("ddim", Arc::new(Ddim));
    r.register("ddpm", Arc::new(Ancestral));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cosine_schedule_invariants() {
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.train_steps(), 1000);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        let ts = s.sampling_timesteps();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 980);
        assert_eq!(*ts.last().unwrap(), 0);
    }

    #[test]
    fn linear_schedule_invariants() {
        let cfg = ScheduleConfig {
            beta_schedule: "linear".into(),
            ..Default::default()
        };
        let s = DiffusionSchedule::new(cfg).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = ScheduleConfig::default();
        cfg.sampler_steps = 2000;
        assert!(DiffusionSchedule::new(cfg).is_err());
        let cfg = ScheduleConfig {
            beta_schedule: "sigmoid".into(),
            ..Default::default()
        };
        assert!(matches!(DiffusionSchedule::new(cfg), Err(MmgtError::UnknownName { .. })));
    }

    #[test]
    fn x0_eps_roundtrip() {
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[0.3f64, -0.7, 1.2], &dev).unwrap().reshape((1, 3)).unwrap();
        let eps = Tensor::new(&[1.0f64, 0.5, -2.0], &dev).unwrap().reshape((1, 3)).unwrap();
        let xt = s.q_sample(&x0, &eps, &[400]).unwrap();
        let back: Vec<f64> = s.eps_from_x0(&xt, &x0, 400).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in back.iter().zip([1.0, 0.5, -2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let x0b: Vec<f64> = s.x0_from_eps(&xt, &eps, 400).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in x0b.iter().zip([0.3, -0.7, 1.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_with_exact_predictions_recovers_x0() {
        // With perfect x0 and eps estimates the deterministic chain lands on x0.
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let dev = Device::Cpu;
        let x0 = Tensor::new(&[[0.25f64, -0.5]], &dev).unwrap();
        let mut x = Tensor::new(&[[1.3f64, -0.2]], &dev).unwrap();
        let ts = s.sampling_timesteps();
        for (i, &t) in ts.iter().enumerate() {
            let eps = s.eps_from_x0(&x, &x0, t).unwrap();
            x = Ddim.step(&s, &x0, &eps, t, ts.get(i + 1).copied(), None).unwrap();
        }
        let v: Vec<Vec<f64>> = x.to_vec2().unwrap();
        assert_eq!(v, vec![vec![0.25, -0.5]]);
    }
}
