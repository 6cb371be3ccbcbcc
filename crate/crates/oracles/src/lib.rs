//! Deliberately naive reference implementations.
//!
//! Nothing here shares code with `mmgt-core`: every routine is written with
//! plain loops over slices so it can serve as an independent check on the
//! vectorised implementations.

/// Bounding-box mask of one frame, decided pixel by pixel.
pub fn bbox_mask_bruteforce(
    points: &[(f32, f32)],
    region: &[usize],
    height: usize,
    width: usize,
) -> Vec<u8> {
    let mut valid: Vec<(i64, i64)> = Vec::new();
    for &c in region {
        let (nx, ny) = points[c];
        let px = (nx * width as f32) as i64;
        let py = (ny * height as f32) as i64;
        if px > 0 && py > 0 {
            valid.push((px, py));
        }
    }
    let mut out = vec![0u8; height * width];
    if valid.is_empty() {
        return out;
    }
    let min_x = valid.iter().map(|p| p.0).min().unwrap().min(width as i64);
    let max_x = valid.iter().map(|p| p.0).max().unwrap().max(0);
    let min_y = valid.iter().map(|p| p.1).min().unwrap().min(height as i64);
    let max_y = valid.iter().map(|p| p.1).max().unwrap().max(0);
    if !(min_x < max_x && min_y < max_y) {
        return out;
    }
    for y in 0..height {
        for x in 0..width {
            let (yi, xi) = (y as i64, x as i64);
            if yi >= min_y && yi < max_y && xi >= min_x && xi < max_x {
                out[y * width + x] = 255;
            }
        }
    }
    out
}

/// Sequence stored as `[t][k]` rows of flattened coordinates.
pub type Seq = Vec<Vec<f64>>;

pub fn rec_loss(x: &Seq, y: &Seq) -> f64 {
    let t = x.len();
    let mut total = 0.0;
    for i in 0..t {
        for k in 0..x[i].len() {
            let d = x[i][k] - y[i][k];
            total += d * d;
        }
    }
    total / t as f64
}

pub fn vel_loss(x: &Seq, y: &Seq) -> f64 {
    let t = x.len();
    let mut total = 0.0;
    for i in 0..t - 1 {
        for k in 0..x[i].len() {
            let d = (x[i + 1][k] - x[i][k]) - (y[i + 1][k] - y[i][k]);
            total += d * d;
        }
    }
    total / (t - 1) as f64
}

pub fn acc_loss(x: &Seq, y: &Seq) -> f64 {
    let t = x.len();
    let mut total = 0.0;
    for i in 0..t - 2 {
        for k in 0..x[i].len() {
            let a = x[i + 2][k] - 2.0 * x[i + 1][k] + x[i][k];
            let b = y[i + 2][k] - 2.0 * y[i + 1][k] + y[i][k];
            total += (a - b) * (a - b);
        }
    }
    total / (t - 2) as f64
}

/// Zeroes every coordinate whose keep flag is false.
pub fn mask_seq(x: &Seq, keep: &[bool]) -> Seq {
    x.iter()
        .map(|row| {
            row.iter()
                .zip(keep)
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn region_loss(x: &Seq, y: &Seq, keep: &[bool]) -> f64 {
    let (xm, ym) = (mask_seq(x, keep), mask_seq(y, keep));
    rec_loss(&xm, &ym) + vel_loss(&xm, &ym) + acc_loss(&xm, &ym)
}

pub fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        total += (a[i] - b[i]) * (a[i] - b[i]);
    }
    total / a.len() as f64
}

/// Row-major matrix product `a (n x k) * b (k x m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// Single-head scaled dot-product attention written with scalar loops.
/// `q` is `n x d`, `k` and `v` are `m x d`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut scores = vec![0.0; m];
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..d {
                s += q[i * d + l] * k[j * d + l];
            }
            scores[j] = s * scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        for j in 0..m {
            let w = scores[j] / z;
            for l in 0..d {
                out[i * d + l] += w * v[j * d + l];
            }
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Frechet distance between Gaussians with diagonal covariances.
pub fn frechet_diagonal(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        total += (mu_a[i] - mu_b[i]).powi(2) + (var_a[i].sqrt() - var_b[i].sqrt()).powi(2);
    }
    total
}

/// Mean Euclidean distance over every unordered pair.
pub fn mean_pairwise_distance(samples: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d: f64 = samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            count += 1;
        }
    }
    total / count as f64
}

pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> f64 {
    let mse = mean_squared(a, b);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// SSIM of one `h x w` plane with an 11x11 Gaussian window (sigma 1.5) whose
/// weights are renormalised over the in-bounds taps at the borders.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, max_value: f64) -> f64 {
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut sw, mut ma, mut mb) = (0.0, 0.0, 0.0);
            for dy in -5i64..=5 {
                for dx in -5i64..=5 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let g = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                    let i = yy as usize * w + xx as usize;
                    sw += g;
                    ma += g * a[i];
                    mb += g * b[i];
                }
            }
            ma /= sw;
            mb /= sw;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in -5i64..=5 {
                for dx in -5i64..=5 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let g = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp() / sw;
                    let i = yy as usize * w + xx as usize;
                    va += g * (a[i] - ma) * (a[i] - ma);
                    vb += g * (b[i] - mb) * (b[i] - mb);
                    cov += g * (a[i] - ma) * (b[i] - mb);
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (h * w) as f64
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma).powi(2);
        vb += (b[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_losses() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = vec![vec![0.0], vec![2.0], vec![4.0]];
        assert_eq!(vel_loss(&x, &y), 1.0);
        let z = vec![vec![0.0], vec![0.0], vec![0.0]];
        let bump = vec![vec![0.0], vec![1.0], vec![0.0]];
        assert_eq!(acc_loss(&z, &bump), 4.0);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = finite_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
