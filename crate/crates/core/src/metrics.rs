//! Evaluation metrics: Frechet distance and diversity in the feature space
//! of a pose autoencoder, and PSNR / SSIM for pixel fidelity.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{MmgtError, Result};
use crate::nn::{silu, Linear, ParamStore};
use crate::pose::PoseSequence;
use crate::rng::CounterRng;

/// Eigenvalues below `-PSD_TOLERANCE` mean the covariance is not PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &Array2<f64>) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(MmgtError::InsufficientData(format!("need at least 2 feature rows, got {n}")));
        }
        let mean = DVector::from_iterator(d, (0..d).map(|j| features.column(j).sum() / n as f64));
        let mut cov = DMatrix::zeros(d, d);
        for row in features.outer_iter() {
            let c = DVector::from_iterator(d, row.iter().zip(mean.iter()).map(|(x, m)| x - m));
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }
}

/// `V sqrt(max(L, 0)) V^T` for symmetric `m`; fails if an eigenvalue is
/// below the tolerance.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -PSD_TOLERANCE {
            return Err(MmgtError::invalid(format!("{what} is not positive semidefinite (eigenvalue {min:e})")));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of `(S_a S_b)^{1/2}` is computed as the trace of the square root
/// of the symmetric matrix `S_a^{1/2} S_b S_a^{1/2}`, which has the same
/// eigenvalues.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(MmgtError::shape(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let sa = psd_sqrt(&a.cov, "first covariance")?;
    psd_sqrt(&b.cov, "second covariance")?;
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if let Some(&min) = eig.eigenvalues.iter().min_by(|x, y| x.total_cmp(y)) {
        if min < -PSD_TOLERANCE * (1.0 + eig.eigenvalues.amax()) {
            return Err(MmgtError::invalid(format!("covariance product has eigenvalue {min:e}")));
        }
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Mean Euclidean distance over `pairs` random pairs of distinct rows.
pub fn diversity(features: &Array2<f64>, pairs: usize, seed: u64) -> Result<f64> {
    let n = features.nrows();
    if n < 2 {
        return Err(MmgtError::InsufficientData(format!("diversity needs at least 2 samples, got {n}")));
    }
    if pairs == 0 {
        return Err(MmgtError::invalid("pair count must be positive"));
    }
    let mut rng = CounterRng::labeled(seed, "diversity");
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.below(n as u64) as usize;
        let mut j = rng.below(n as u64 - 1) as usize;
        if j >= i {
            j += 1;
        }
        let d: f64 = features
            .row(i)
            .iter()
            .zip(features.row(j).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        total += d.sqrt();
    }
    Ok(total / pairs as f64)
}

fn check_same(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(MmgtError::shape(format!("videos differ in shape: {a:?} vs {b:?}")));
    }
    if a.iter().product::<usize>() == 0 {
        return Err(MmgtError::invalid("empty video"));
    }
    Ok(())
}

/// `10 log10(MAX^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Array4<u8>, b: &Array4<u8>, max_value: f64) -> Result<f64> {
    check_same(a.shape(), b.shape())?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

const SSIM_RADIUS: i64 = 5;
const SSIM_SIGMA: f64 = 1.5;

/// Gaussian-weighted local mean; the window is truncated at the border and
/// renormalised over the pixels that remain.
fn local_mean(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for xx in 0..w {
                let (mut acc, mut sw) = (0.0, 0.0);
                for (k, gk) in g.iter().enumerate() {
                    let o = k as i64 - SSIM_RADIUS;
                    let (yy, xq) = if horizontal { (y as i64, xx as i64 + o) } else { (y as i64 + o, xx as i64) };
                    if yy < 0 || xq < 0 || yy >= h as i64 || xq >= w as i64 {
                        continue;
                    }
                    acc += gk * src[yy as usize * w + xq as usize];
                    sw += gk;
                }
                out[y * w + xx] = acc / sw;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Mean SSIM of one plane.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, max_value: f64) -> f64 {
    let g: Vec<f64> = (-SSIM_RADIUS..=SSIM_RADIUS)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let ma = local_mean(a, h, w, &g);
    let mb = local_mean(b, h, w, &g);
    let saa = local_mean(&prod(a, a), h, w, &g);
    let sbb = local_mean(&prod(b, b), h, w, &g);
    let sab = local_mean(&prod(a, b), h, w, &g);
    let mut total = 0.0;
    for i in 0..h * w {
        let va = saa[i] - ma[i] * ma[i];
        let vb = sbb[i] - mb[i] * mb[i];
        let cov = sab[i] - ma[i] * mb[i];
        total += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2))
            / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total / (h * w) as f64
}

/// SSIM averaged over colour channels and frames of `N x H x W x C` videos.
pub fn ssim(a: &Array4<u8>, b: &Array4<u8>, max_value: f64) -> Result<f64> {
    check_same(a.shape(), b.shape())?;
    let (n, h, w, c) = a.dim();
    let mut total = 0.0;
    for f in 0..n {
        for ch in 0..c {
            let pa: Vec<f64> = a.slice(ndarray::s![f, .., .., ch]).iter().map(|&v| v as f64).collect();
            let pb: Vec<f64> = b.slice(ndarray::s![f, .., .., ch]).iter().map(|&v| v as f64).collect();
            total += ssim_plane(&pa, &pb, h, w, max_value);
        }
    }
    Ok(total / (n * c) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            latent_dim: 32,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

pub const MIN_AUTOENCODER_CLIPS: usize = 100;

/// MLP autoencoder over flattened `(x, y)` pose windows, standardised per
/// input dimension.
pub struct PoseAutoencoder {
    pub config: AutoencoderConfig,
    pub frames: usize,
    pub keypoints: usize,
    store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    mean: Tensor,
    std: Tensor,
}

/// Flattened xy coordinates, one row per clip.
pub fn flatten_poses(poses: &[&PoseSequence]) -> Result<(Array2<f32>, usize, usize)> {
    let first = poses.first().ok_or_else(|| MmgtError::InsufficientData("no pose clips".into()))?;
    let (n, cp, _) = first.data.dim();
    let mut out = Array2::zeros((poses.len(), n * cp * 2));
    for (i, p) in poses.iter().enumerate() {
        if p.data.dim() != (n, cp, 3) {
            return Err(MmgtError::shape("all clips must share frame and keypoint counts"));
        }
        for ((t, k, c), v) in p.data.indexed_iter() {
            if c < 2 {
                out[[i, (t * cp + k) * 2 + c]] = *v;
            }
        }
    }
    Ok((out, n, cp))
}

fn to_tensor(a: &Array2<f32>) -> Result<Tensor> {
    Ok(Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), a.dim(), &Device::Cpu)?)
}

impl PoseAutoencoder {
    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let z = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        self.enc2.forward(&silu(&self.enc1.forward(&z)?)?)
    }

    fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_tensor(x)?;
        self.dec2.forward(&silu(&self.dec1.forward(&z)?)?)
    }

    fn standardised(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    /// Latent features, one row per clip.
    pub fn encode(&self, poses: &[&PoseSequence]) -> Result<Array2<f64>> {
        let (flat, n, cp) = flatten_poses(poses)?;
        if (n, cp) != (self.frames, self.keypoints) {
            return Err(MmgtError::shape(format!(
                "autoencoder expects {}x{} clips, got {n}x{cp}",
                self.frames, self.keypoints
            )));
        }
        let z = self.encode_tensor(&to_tensor(&flat)?)?;
        let v = z.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let rows = v.len();
        Array2::from_shape_vec((rows, self.config.latent_dim), v.into_iter().flatten().collect())
            .map_err(|e| MmgtError::shape(e.to_string()))
    }

    /// Mean squared reconstruction error in standardised units.
    pub fn reconstruction_mse(&self, poses: &[&PoseSequence]) -> Result<f64> {
        let (flat, _, _) = flatten_poses(poses)?;
        let x = to_tensor(&flat)?;
        let r = self.reconstruct(&x)?;
        let target = self.standardised(&x)?;
        Ok((r - target)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn parameters(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.store.export()
    }
}

/// Trains the feature extractor; returns it with the per-epoch mean training
/// reconstruction error.
pub fn train_pose_autoencoder(
    poses: &[&PoseSequence],
    config: &AutoencoderConfig,
) -> Result<(PoseAutoencoder, Vec<f64>)> {
    if poses.len() < MIN_AUTOENCODER_CLIPS {
        return Err(MmgtError::InsufficientData(format!(
            "autoencoder needs at least {MIN_AUTOENCODER_CLIPS} clips, got {}",
            poses.len()
        )));
    }
    if config.latent_dim == 0 || config.hidden_dim == 0 || config.batch_size == 0 {
        return Err(MmgtError::invalid("autoencoder sizes must be positive"));
    }
    let (flat, frames, keypoints) = flatten_poses(poses)?;
    let dim = flat.ncols();
    let mean = flat.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let std = flat.std_axis(ndarray::Axis(0), 0.0).mapv(|s| s.max(1e-4));
    let mut store = ParamStore::new(config.seed, DType::F32);
    let mut root = store.root();
    let enc1 = Linear::new(&mut root.sub("enc1"), dim, config.hidden_dim)?;
    let enc2 = Linear::new(&mut root.sub("enc2"), config.hidden_dim, config.latent_dim)?;
    let dec1 = Linear::new(&mut root.sub("dec1"), config.latent_dim, config.hidden_dim)?;
    let dec2 = Linear::new(&mut root.sub("dec2"), config.hidden_dim, dim)?;
    let ae = PoseAutoencoder {
        config: config.clone(),
        frames,
        keypoints,
        enc1,
        enc2,
        dec1,
        dec2,
        mean: Tensor::from_vec(mean.to_vec(), (1, dim), &Device::Cpu)?,
        std: Tensor::from_vec(std.to_vec(), (1, dim), &Device::Cpu)?,
        store,
    };
    let mut opt = AdamW::new(
        ae.store.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let x = to_tensor(&flat)?;
    let rng = CounterRng::labeled(config.seed, "autoencoder");
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = rng.fork(epoch as u64).permutation(poses.len());
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let xb = x.index_select(&idx, 0)?;
            let loss = (ae.reconstruct(&xb)? - ae.standardised(&xb)?)?.sqr()?.mean_all()?;
            sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
            count += chunk.len();
            opt.backward_step(&loss)?;
        }
        history.push(sum / count as f64);
    }
    Ok((ae, history))
}

/// FGD between two clip sets in the autoencoder's feature space.
pub fn fgd(ae: &PoseAutoencoder, real: &[&PoseSequence], generated: &[&PoseSequence]) -> Result<f64> {
    let a = FeatureStats::from_features(&ae.encode(real)?)?;
    let b = FeatureStats::from_features(&ae.encode(generated)?)?;
    frechet_distance(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
        let d = mean.len();
        FeatureStats {
            mean: DVector::from_row_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
            count: 10,
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats(&[1.0, 2.0, 3.0], &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let i = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let j = stats(&[3.0, 4.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!((frechet_distance(&i, &j).unwrap() - 25.0).abs() < 1e-6);
        let x = stats(&[0.0, 1.0, 2.0], &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let ab = frechet_distance(&a, &x).unwrap();
        let ba = frechet_distance(&x, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
    }

    #[test]
    fn frechet_rejects_bad_inputs() {
        let a = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let b = stats(&[0.0], &[1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(MmgtError::ShapeMismatch(_))));
        let neg = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -0.5]);
        assert!(frechet_distance(&a, &neg).is_err());
    }

    #[test]
    fn diversity_simple_cases() {
        let same = Array2::from_elem((5, 3), 1.5);
        assert_eq!(diversity(&same, 50, 0).unwrap(), 0.0);
        let two = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert!((diversity(&two, 10, 0).unwrap() - 5.0).abs() < 1e-12);
        assert!(diversity(&Array2::zeros((1, 2)), 10, 0).is_err());
    }

    #[test]
    fn psnr_and_ssim_identities() {
        let mut r = CounterRng::new(0, 0);
        let a = Array4::from_shape_fn((2, 12, 12, 3), |_| r.below(200) as u8);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-12);
        let b = a.mapv(|v| v + 10);
        let expected = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
        assert!((psnr(&a, &b, 255.0).unwrap() - expected).abs() < 1e-6);
        let c = Array4::from_shape_fn((2, 12, 12, 3), |_| r.below(256) as u8);
        assert!((ssim(&a, &c, 255.0).unwrap() - ssim(&c, &a, 255.0).unwrap()).abs() < 1e-12);
        assert!(psnr(&a, &Array4::zeros((1, 12, 12, 3)), 255.0).is_err());
    }

    #[test]
    fn stats_need_two_rows() {
        assert!(FeatureStats::from_features(&Array2::zeros((1, 3))).is_err());
        let s = FeatureStats::from_features(&Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
    }
}
