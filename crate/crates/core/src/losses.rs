//! Pose-sequence losses for the pose stage and the noise-prediction objective
//! for the video stage.
//!
//! Pose tensors are `B x T x ...`; trailing axes are flattened into one
//! coordinate axis. Norms sum over coordinates, average over time with the
//! `1/T`, `1/(T-1)`, `1/(T-2)` prefixes, and average over the batch.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::pose::{make_spatial_masks, KeypointLayout, SpatialMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 3.0,
            lambda_b: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_b >= 0.0) {
            return Err(MmgtError::invalid("loss weights must be non-negative"));
        }
        if self.lambda_f == 0.0 && self.lambda_b == 0.0 {
            return Err(MmgtError::invalid("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

fn as_btk(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(MmgtError::shape(format!("expected B x T x ..., got {dims:?}")));
    }
    let (b, t) = (dims[0], dims[1]);
    Ok(x.reshape((b, t, x.elem_count() / (b * t).max(1)))?)
}

fn pair(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.dims() != y.dims() {
        return Err(MmgtError::shape(format!(
            "loss inputs differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok((as_btk(x)?, as_btk(y)?))
}

/// `sum ||.||^2 / (batch * steps)` of a `B x S x K` difference tensor.
fn reduce(d: &Tensor, steps: usize) -> Result<Tensor> {
    let b = d.dims()[0];
    Ok((d.sqr()?.sum_all()? / (b * steps) as f64)?)
}

fn first_difference(x: &Tensor) -> Result<Tensor> {
    let t = x.dims()[1];
    Ok((x.narrow(1, 1, t - 1)? - x.narrow(1, 0, t - 1)?)?)
}

pub fn rec_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let (x, y) = pair(x, x_hat)?;
    let t = x.dims()[1];
    if t < 1 {
        return Err(MmgtError::shape("reconstruction loss needs T >= 1"));
    }
    reduce(&(x - y)?, t)
}

pub fn vel_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let (x, y) = pair(x, x_hat)?;
    let t = x.dims()[1];
    if t < 2 {
        return Err(MmgtError::shape("velocity loss needs T >= 2"));
    }
    let d = (first_difference(&x)? - first_difference(&y)?)?;
    reduce(&d, t - 1)
}

pub fn acc_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let (x, y) = pair(x, x_hat)?;
    let t = x.dims()[1];
    if t < 3 {
        return Err(MmgtError::shape("acceleration loss needs T >= 3"));
    }
    let d = (first_difference(&first_difference(&x)?)? - first_difference(&first_difference(&y)?)?)?;
    reduce(&d, t - 2)
}

/// Per-coordinate weights for a `Cp x 3` pose: 1 where the keypoint is in the
/// spatial mask and the coordinate is modelled, else 0.
pub fn coordinate_mask(mask: &SpatialMask, modelled_coords: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(mask.len() * 3);
    for &m in &mask.values {
        for k in 0..3 {
            out.push(if m == 1 && k < modelled_coords { 1.0 } else { 0.0 });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RegionTerms {
    pub rec: Tensor,
    pub vel: Tensor,
    pub acc: Tensor,
}

impl RegionTerms {
    pub fn sum(&self) -> Result<Tensor> {
        Ok(((&self.rec + &self.vel)? + &self.acc)?)
    }
}

fn region_terms(x: &Tensor, x_hat: &Tensor, coord_mask: &[f32]) -> Result<RegionTerms> {
    let (x, y) = pair(x, x_hat)?;
    let k = x.dims()[2];
    if coord_mask.len() != k {
        return Err(MmgtError::shape(format!(
            "mask covers {} coordinates, tensors have {k}",
            coord_mask.len()
        )));
    }
    if coord_mask.iter().all(|&v| v == 0.0) {
        return Err(MmgtError::invalid("region loss with an all-zero mask"));
    }
    let m = Tensor::from_slice(coord_mask, (1, 1, k), x.device())?.to_dtype(x.dtype())?;
    // mask first, then difference
    let xm = x.broadcast_mul(&m)?;
    let ym = y.broadcast_mul(&m)?;
    Ok(RegionTerms {
        rec: rec_loss(&xm, &ym)?,
        vel: vel_loss(&xm, &ym)?,
        acc: acc_loss(&xm, &ym)?,
    })
}

/// `L_rec + L_vel + L_acc` restricted to the masked coordinates.
pub fn region_loss(x: &Tensor, x_hat: &Tensor, coord_mask: &[f32]) -> Result<Tensor> {
    region_terms(x, x_hat, coord_mask)?.sum()
}

#[derive(Debug, Clone)]
pub struct SmgaLoss {
    pub total: Tensor,
    pub face: RegionTerms,
    pub body: RegionTerms,
}

/// Scalar view of [`SmgaLoss`] for logging and CSV output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub rec_f: f64,
    pub vel_f: f64,
    pub acc_f: f64,
    pub rec_b: f64,
    pub vel_b: f64,
    pub acc_b: f64,
    pub l_f: f64,
    pub l_b: f64,
    pub total: f64,
}

impl SmgaLoss {
    pub fn record(&self, step: usize) -> Result<LossRecord> {
        let s = |t: &Tensor| -> Result<f64> { crate::nn::scalar(t) };
        let (rec_f, vel_f, acc_f) = (s(&self.face.rec)?, s(&self.face.vel)?, s(&self.face.acc)?);
        let (rec_b, vel_b, acc_b) = (s(&self.body.rec)?, s(&self.body.vel)?, s(&self.body.acc)?);
        Ok(LossRecord {
            step,
            rec_f,
            vel_f,
            acc_f,
            rec_b,
            vel_b,
            acc_b,
            l_f: rec_f + vel_f + acc_f,
            l_b: rec_b + vel_b + acc_b,
            total: s(&self.total)?,
        })
    }
}

/// `lambda_f * L_f + lambda_b * L_b` over `B x T x Cp x 3` poses.
pub fn total_smga_loss(
    x: &Tensor,
    x_hat: &Tensor,
    layout: &KeypointLayout,
    weights: &LossWeights,
) -> Result<SmgaLoss> {
    weights.validate()?;
    let (mf, mb) = make_spatial_masks(layout)?;
    let coords = layout.modelled_coords();
    let face = region_terms(x, x_hat, &coordinate_mask(&mf, coords))?;
    let body = region_terms(x, x_hat, &coordinate_mask(&mb, coords))?;
    let total = ((face.sum()? * weights.lambda_f)? + (body.sum()? * weights.lambda_b)?)?;
    Ok(SmgaLoss { total, face, body })
}

/// Mean squared error between injected and predicted noise.
pub fn latent_eps_loss(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_pred.dims() {
        return Err(MmgtError::shape(format!(
            "noise shapes differ: {:?} vs {:?}",
            eps.dims(),
            eps_pred.dims()
        )));
    }
    Ok((eps - eps_pred)?.sqr()?.mean_all()?)
}
