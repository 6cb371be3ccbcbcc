//! Property checks shared by the core integration tests and the acceptance
//! runner. Each check returns an [`Outcome`] rather than panicking so the
//! runner can print a verdict for every criterion.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array3;

use mmgt::losses::{acc_loss, coordinate_mask, rec_loss, region_loss, total_smga_loss, vel_loss, LossWeights};
use mmgt::maskgen::{background_mask, combine_masks, motion_masks, region_mask, MaskVideo, RegionTag};
use mmgt::nn::{Attention, ParamStore};
use mmgt::pose::{make_spatial_masks, KeypointLayout, PoseSequence};
use mmgt::rng::CounterRng;
use mmgt::smga::{FilmGenerator, MotionBlock};
use mmgt::videogen::{mm_haa, BlockContext, DenoiseBlock, MmHaa, VideoGenConfig};
use mmgt::Result;
use mmgt_oracles as oracle;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    /// Conjunction of several outcomes, details joined.
    pub fn all(parts: &[Outcome]) -> Self {
        Self {
            passed: parts.iter().all(|p| p.passed),
            detail: parts.iter().map(|p| p.detail.as_str()).collect::<Vec<_>>().join("; "),
        }
    }
}

// ---------------------------------------------------------------- masks

/// Random keypoints that exercise the validity rule, clipping at the far
/// edge and collapsed frames.
pub fn random_poses(frames: usize, channels: usize, rng: &mut CounterRng) -> Result<PoseSequence> {
    let mut data = Array3::<f32>::zeros((frames, channels, 3));
    for t in 0..frames {
        let collapsed = rng.bernoulli(0.05);
        let anchor = (rng.uniform() as f32, rng.uniform() as f32);
        for c in 0..channels {
            let (x, y) = if collapsed {
                anchor
            } else {
                let mut coord = || -> f32 {
                    let u = rng.uniform();
                    if u < 0.06 {
                        0.0
                    } else if u < 0.1 {
                        -(rng.uniform() as f32) * 0.1
                    } else {
                        (rng.uniform() * 1.04) as f32
                    }
                };
                (coord(), coord())
            };
            data[[t, c, 0]] = x;
            data[[t, c, 1]] = y;
            data[[t, c, 2]] = 1.0;
        }
    }
    PoseSequence::new(data, 25.0)
}

fn frame_points(poses: &PoseSequence, t: usize) -> Vec<(f32, f32)> {
    (0..poses.channels())
        .map(|c| (poses.data[[t, c, 0]], poses.data[[t, c, 1]]))
        .collect()
}

fn frame_slice(mask: &MaskVideo, t: usize) -> Vec<u8> {
    mask.data.index_axis(ndarray::Axis(0), t).iter().copied().collect()
}

/// Face, lips and hands masks against the brute-force oracle, frame by frame.
pub fn mask_oracle(frames: usize, seed: u64) -> Result<Outcome> {
    let layout = KeypointLayout::toy16();
    let (h, w) = (96, 128);
    let mut rng = CounterRng::labeled(seed, "criteria-mask-oracle");
    let poses = random_poses(frames, layout.total_channels, &mut rng)?;

    let start = Instant::now();
    let masks = motion_masks(&poses, &layout, h, w)?;
    let face_only = region_mask(&poses, &layout.face, h, w, RegionTag::Face)?;
    let mut mismatches = 0usize;
    let mut nonempty = 0usize;
    for t in 0..frames {
        let pts = frame_points(&poses, t);
        let face = oracle::bbox_mask_bruteforce(&pts, &layout.face, h, w);
        let lips = oracle::bbox_mask_bruteforce(&pts, &layout.lips, h, w);
        let left = oracle::bbox_mask_bruteforce(&pts, &layout.left_hand, h, w);
        let right = oracle::bbox_mask_bruteforce(&pts, &layout.right_hand, h, w);
        let hands: Vec<u8> = left.iter().zip(&right).map(|(&a, &b)| a.max(b)).collect();
        for (got, want) in [
            (frame_slice(&masks.face, t), &face),
            (frame_slice(&face_only, t), &face),
            (frame_slice(&masks.lips, t), &lips),
            (frame_slice(&masks.hands, t), &hands),
        ] {
            if &got != want {
                mismatches += 1;
            }
            if want.iter().any(|&v| v != 0) {
                nonempty += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = mismatches == 0 && elapsed < Duration::from_secs(10) && nonempty > 0;
    Ok(Outcome::new(
        passed,
        format!(
            "{frames} frames x 3 regions: {mismatches} mismatching frame masks, {nonempty} non-empty, {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn random_mask(rng: &mut CounterRng, frames: usize, h: usize, w: usize) -> Result<MaskVideo> {
    let poses = random_poses(frames, 4, rng)?;
    let region = [0, 1, 2, 3];
    region_mask(&poses, &region, h, w, RegionTag::Face)
}

/// Background complement, union laws and degenerate frames.
pub fn mask_algebra(seed: u64) -> Result<Outcome> {
    let layout = KeypointLayout::toy16();
    let mut rng = CounterRng::labeled(seed, "criteria-mask-algebra");
    let (h, w) = (40, 56);

    let poses = random_poses(200, layout.total_channels, &mut rng)?;
    let masks = motion_masks(&poses, &layout, h, w)?;
    let complement = masks
        .background
        .data
        .iter()
        .zip(masks.face_hands.data.iter())
        .all(|(&b, &f)| b as u16 + f as u16 == 255);
    let rebuilt = background_mask(&masks.face_hands)?.data == masks.background.data;

    let mut law_failures = 0usize;
    for _ in 0..100 {
        let a = random_mask(&mut rng, 3, h, w)?;
        let b = random_mask(&mut rng, 3, h, w)?;
        let c = random_mask(&mut rng, 3, h, w)?;
        let ab = combine_masks(&a, &b)?;
        let ba = combine_masks(&b, &a)?;
        let ab_c = combine_masks(&ab, &c)?;
        let a_bc = combine_masks(&a, &combine_masks(&b, &c)?)?;
        let aa = combine_masks(&a, &a)?;
        if ab.data != ba.data || ab_c.data != a_bc.data || aa.data != a.data {
            law_failures += 1;
        }
    }

    // One valid keypoint per region (the rest sit on the invalid axis), and
    // regions whose keypoints share a pixel.
    let frames = 50;
    let mut data = Array3::<f32>::zeros((frames, layout.total_channels, 3));
    for t in 0..frames {
        let keep = layout.face[t % layout.face.len()];
        let pixel = (rng.uniform() as f32 * 0.9 + 0.05, rng.uniform() as f32 * 0.9 + 0.05);
        for c in 0..layout.total_channels {
            if t % 2 == 0 {
                if c == keep {
                    data[[t, c, 0]] = pixel.0;
                    data[[t, c, 1]] = pixel.1;
                } else {
                    data[[t, c, 0]] = 0.0;
                    data[[t, c, 1]] = rng.uniform() as f32;
                }
            } else {
                data[[t, c, 0]] = pixel.0;
                data[[t, c, 1]] = pixel.1;
            }
            data[[t, c, 2]] = 1.0;
        }
    }
    let degenerate = PoseSequence::new(data, 25.0)?;
    let dm = motion_masks(&degenerate, &layout, h, w)?;
    let all_zero = [&dm.face, &dm.lips, &dm.hands, &dm.face_hands]
        .iter()
        .all(|m| m.data.iter().all(|&v| v == 0));

    let passed = complement && rebuilt && law_failures == 0 && all_zero;
    Ok(Outcome::new(
        passed,
        format!(
            "complement {complement}, rebuild {rebuilt}, union-law failures {law_failures}/100, degenerate frames empty {all_zero}"
        ),
    ))
}

// ---------------------------------------------------------------- losses

fn to_seqs(values: &[f64], b: usize, t: usize, k: usize) -> Vec<oracle::Seq> {
    (0..b)
        .map(|i| {
            (0..t)
                .map(|s| values[(i * t + s) * k..(i * t + s + 1) * k].to_vec())
                .collect()
        })
        .collect()
}

fn batch_mean(seqs_x: &[oracle::Seq], seqs_y: &[oracle::Seq], f: impl Fn(&oracle::Seq, &oracle::Seq) -> f64) -> f64 {
    let total: f64 = seqs_x.iter().zip(seqs_y).map(|(x, y)| f(x, y)).sum();
    total / seqs_x.len() as f64
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn keep_flags(layout: &KeypointLayout, face: bool) -> Vec<bool> {
    let coords = if layout.trainable_confidence { 3 } else { 2 };
    let mut keep = Vec::with_capacity(layout.total_channels * 3);
    for c in 0..layout.total_channels {
        let in_face = layout.face.contains(&c);
        for k in 0..3 {
            keep.push(in_face == face && k < coords);
        }
    }
    keep
}

/// Every loss term against the loop oracles on random tensors.
pub fn loss_oracles(cases: usize, seed: u64) -> Result<Outcome> {
    let mut rng = CounterRng::labeled(seed, "criteria-loss-oracles");
    let dev = Device::Cpu;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut layout = KeypointLayout::toy16();
        layout.trainable_confidence = case % 3 == 0;
        let b = 1 + rng.below(3) as usize;
        let t = 3 + rng.below(10) as usize;
        let k = layout.total_channels * 3;
        let xv = rng.normal_vec(b * t * k);
        let yv = rng.normal_vec(b * t * k);
        let x = Tensor::from_vec(xv.clone(), (b, t, k), &dev)?;
        let y = Tensor::from_vec(yv.clone(), (b, t, k), &dev)?;
        let (sx, sy) = (to_seqs(&xv, b, t, k), to_seqs(&yv, b, t, k));

        let keep_f = keep_flags(&layout, true);
        let keep_b = keep_flags(&layout, false);
        let (mf, mb) = make_spatial_masks(&layout)?;
        let coords = layout.modelled_coords();
        let weights = LossWeights {
            lambda_f: 0.5 + rng.uniform() * 3.0,
            lambda_b: 0.5 + rng.uniform() * 3.0,
        };
        let face_want = batch_mean(&sx, &sy, |a, c| oracle::region_loss(a, c, &keep_f));
        let body_want = batch_mean(&sx, &sy, |a, c| oracle::region_loss(a, c, &keep_b));
        let total = total_smga_loss(
            &x.reshape((b, t, layout.total_channels, 3))?,
            &y.reshape((b, t, layout.total_channels, 3))?,
            &layout,
            &weights,
        )?;

        let pairs = [
            (scalar(&rec_loss(&x, &y)?)?, batch_mean(&sx, &sy, oracle::rec_loss)),
            (scalar(&vel_loss(&x, &y)?)?, batch_mean(&sx, &sy, oracle::vel_loss)),
            (scalar(&acc_loss(&x, &y)?)?, batch_mean(&sx, &sy, oracle::acc_loss)),
            (scalar(&region_loss(&x, &y, &coordinate_mask(&mf, coords))?)?, face_want),
            (scalar(&region_loss(&x, &y, &coordinate_mask(&mb, coords))?)?, body_want),
            (
                scalar(&total.total)?,
                weights.lambda_f * face_want + weights.lambda_b * body_want,
            ),
        ];
        for (got, want) in pairs {
            worst = worst.max(rel(got, want));
        }
    }
    Ok(Outcome::new(
        worst <= 1e-9,
        format!("{cases} random tensors, worst relative error {worst:.2e}"),
    ))
}

/// Values on a coarse dyadic grid, so sums, differences and squares in f64
/// are exact.
fn dyadic(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| (rng.below(1025) as f64 - 512.0) / 256.0).collect()
}

/// Offset invariance of the velocity term, affine invariance of the
/// acceleration term and the face/body decomposition, all compared with `==`.
pub fn loss_invariances(seed: u64) -> Result<Outcome> {
    let mut rng = CounterRng::labeled(seed, "criteria-loss-invariance");
    let dev = Device::Cpu;
    let layout = KeypointLayout::toy16();
    let k = layout.total_channels * 3;
    let mut failures = Vec::new();

    for trial in 0..20 {
        let (b, t) = (1 + trial % 3, 4 + trial % 7);
        let x = Tensor::from_vec(dyadic(&mut rng, b * t * k), (b, t, k), &dev)?;
        let y = Tensor::from_vec(dyadic(&mut rng, b * t * k), (b, t, k), &dev)?;

        let offset = Tensor::from_vec(dyadic(&mut rng, b * k), (b, 1, k), &dev)?;
        let shifted = y.broadcast_add(&offset)?;
        if scalar(&vel_loss(&x, &shifted)?)? != scalar(&vel_loss(&x, &y)?)? {
            failures.push(format!("vel offset (trial {trial})"));
        }

        let slope = dyadic(&mut rng, b * k);
        let mut ramp = Vec::with_capacity(b * t * k);
        for i in 0..b {
            for s in 0..t {
                ramp.extend(slope[i * k..(i + 1) * k].iter().map(|v| v * s as f64));
            }
        }
        let ramp = Tensor::from_vec(ramp, (b, t, k), &dev)?;
        let affine = (y.broadcast_add(&offset)? + ramp)?;
        if scalar(&acc_loss(&x, &affine)?)? != scalar(&acc_loss(&x, &y)?)? {
            failures.push(format!("acc affine (trial {trial})"));
        }
    }

    // Each term is checked where its divisor B * steps is a power of two, so
    // the division is exact and the identity holds bit for bit.
    let (mf, mb) = make_spatial_masks(&layout)?;
    let coords = layout.modelled_coords();
    let full: Vec<f32> = (0..k).map(|i| if i % 3 < coords { 1.0 } else { 0.0 }).collect();
    let (cf, cb) = (coordinate_mask(&mf, coords), coordinate_mask(&mb, coords));
    let mask_tensor = |m: &[f32]| -> Result<Tensor> {
        Ok(Tensor::from_vec(m.iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, 1, k), &dev)?)
    };
    let (tf, tb, tall) = (mask_tensor(&cf)?, mask_tensor(&cb)?, mask_tensor(&full)?);
    type Term = fn(&Tensor, &Tensor) -> mmgt::Result<Tensor>;
    let terms: [(&str, Term, usize); 3] = [("rec", rec_loss, 8), ("vel", vel_loss, 9), ("acc", acc_loss, 10)];
    for (name, term, t) in terms {
        for b in [1usize, 2, 4] {
            let x = Tensor::from_vec(dyadic(&mut rng, b * t * k), (b, t, k), &dev)?;
            let y = Tensor::from_vec(dyadic(&mut rng, b * t * k), (b, t, k), &dev)?;
            let part = |m: &Tensor| -> Result<f64> {
                scalar(&term(&x.broadcast_mul(m)?, &y.broadcast_mul(m)?)?)
            };
            let (lf, lb, lall) = (part(&tf)?, part(&tb)?, part(&tall)?);
            if lf + lb != lall {
                failures.push(format!("{name} decomposition B={b}: {lf} + {lb} != {lall}"));
            }
        }
    }

    // The full weighted objective with unit weights against the unmasked loss.
    let weights = LossWeights {
        lambda_f: 1.0,
        lambda_b: 1.0,
    };
    let (b, t) = (2, 8);
    let x = Tensor::from_vec(dyadic(&mut rng, b * t * k), (b, t, layout.total_channels, 3), &dev)?;
    let y = Tensor::from_vec(dyadic(&mut rng, b * t * k), (b, t, layout.total_channels, 3), &dev)?;
    let loss = total_smga_loss(&x, &y, &layout, &weights)?;
    let rec = loss.record(0)?;
    let flat = |v: &Tensor| v.reshape((b, t, k));
    let unmasked = scalar(&region_loss(&flat(&x)?, &flat(&y)?, &full)?)?;
    let rec_sum = rec.rec_f + rec.rec_b;
    let rec_full = scalar(&rec_loss(&flat(&x)?.broadcast_mul(&tall)?, &flat(&y)?.broadcast_mul(&tall)?)?)?;
    if rec_sum != rec_full {
        failures.push(format!("objective rec split {rec_sum} != {rec_full}"));
    }
    let drift = rel(rec.l_f + rec.l_b, unmasked);

    Ok(Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("all invariances exact (summed objective drift {drift:.1e})")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    ))
}

// ---------------------------------------------------------------- gradients

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_error: f64,
    pub coordinates: usize,
}

fn randomize(store: &ParamStore, rng: &mut CounterRng, keep: impl Fn(&str) -> bool) -> Result<()> {
    for (name, var) in store.named() {
        if keep(name) {
            continue;
        }
        let values: Vec<f64> = rng.normal_vec(var.elem_count()).iter().map(|v| 0.4 * v).collect();
        var.set(&Tensor::from_vec(values, var.shape(), &Device::Cpu)?)?;
    }
    Ok(())
}

fn input(rng: &mut CounterRng, shape: &[usize]) -> Result<Var> {
    let n = shape.iter().product();
    Ok(Var::from_tensor(&Tensor::from_vec(rng.normal_vec(n), shape, &Device::Cpu)?)?)
}

fn values(var: &Var) -> Result<Vec<f64>> {
    Ok(var.as_tensor().flatten_all()?.to_vec1::<f64>()?)
}

/// Analytic gradient of `<f(), R>` for a fixed random `R` against central
/// differences, over every input coordinate and a sample of parameters.
fn grad_check(
    name: &'static str,
    store: &ParamStore,
    inputs: &[&Var],
    rng: &mut CounterRng,
    f: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    let out = f()?;
    let proj = Tensor::from_vec(rng.normal_vec(out.elem_count()), out.shape(), &Device::Cpu)?;
    let objective = |o: &Tensor| -> Result<Tensor> { Ok((o * &proj)?.sum_all()?) };
    let grads = objective(&out)?.backward()?;

    let mut vars: Vec<Var> = inputs.iter().map(|v| (*v).clone()).collect();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, v) in inputs.iter().enumerate() {
        coords.extend((0..v.elem_count()).map(|j| (i, j)));
    }
    let params: Vec<Var> = store.vars();
    let total: usize = params.iter().map(|v| v.elem_count()).sum();
    let picks = rng.permutation(total);
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in picks.iter().take(48) {
        let (mut idx, mut which) = (p, 0);
        while idx >= params[which].elem_count() {
            idx -= params[which].elem_count();
            which += 1;
        }
        let v = *slot.entry(which).or_insert_with(|| {
            vars.push(params[which].clone());
            vars.len() - 1
        });
        coords.push((v, idx));
    }

    let base: Vec<Vec<f64>> = vars.iter().map(values).collect::<Result<_>>()?;
    let mut analytic = Vec::with_capacity(coords.len());
    for &(v, j) in &coords {
        let g = match grads.get(vars[v].as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[j],
            None => 0.0,
        };
        analytic.push(g);
    }
    let start: Vec<f64> = coords.iter().map(|&(v, j)| base[v][j]).collect();

    let mut failure = None;
    let numeric = oracle::finite_difference(
        |p| {
            let run = || -> Result<f64> {
                let mut current = base.clone();
                for (&(v, j), &val) in coords.iter().zip(p) {
                    current[v][j] = val;
                }
                let mut touched = BTreeMap::new();
                for &(v, _) in &coords {
                    touched.insert(v, ());
                }
                for &v in touched.keys() {
                    vars[v].set(&Tensor::from_vec(current[v].clone(), vars[v].shape(), &Device::Cpu)?)?;
                }
                scalar(&objective(&f()?)?)
            };
            run().unwrap_or_else(|e| {
                failure = Some(e.to_string());
                f64::NAN
            })
        },
        &start,
        1e-5,
    );
    for (v, values) in vars.iter().zip(&base) {
        v.set(&Tensor::from_vec(values.clone(), v.shape(), &Device::Cpu)?)?;
    }
    if let Some(e) = failure {
        return Err(mmgt::MmgtError::InvalidArgument(format!("{name}: {e}")));
    }
    Ok(GradCheck {
        name,
        rel_error: oracle::relative_error(&analytic, &numeric),
        coordinates: coords.len(),
    })
}

/// Gradient checks for the attention, FiLM and block modules at f64.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = CounterRng::labeled(seed, "criteria-gradients");
    let mut out = Vec::new();
    let dim = 8;

    {
        let mut store = ParamStore::new(seed, DType::F64);
        let attn = Attention::new(&mut store.root().sub("attn"), dim, dim, dim, 2)?;
        randomize(&store, &mut rng, |_| false)?;
        let x = input(&mut rng, &[1, 6, dim])?;
        out.push(grad_check("self_attention", &store, &[&x], &mut rng, || {
            attn.forward(x.as_tensor(), x.as_tensor())
        })?);
    }
    {
        let mut store = ParamStore::new(seed, DType::F64);
        let attn = Attention::new(&mut store.root().sub("attn"), dim, 5, dim, 2)?;
        randomize(&store, &mut rng, |_| false)?;
        let x = input(&mut rng, &[1, 6, dim])?;
        let ctx = input(&mut rng, &[1, 4, 5])?;
        out.push(grad_check("cross_attention", &store, &[&x, &ctx], &mut rng, || {
            attn.forward(x.as_tensor(), ctx.as_tensor())
        })?);
    }
    {
        let mut store = ParamStore::new(seed, DType::F64);
        let film = FilmGenerator::new(&mut store.root().sub("film"), dim, dim)?;
        randomize(&store, &mut rng, |_| false)?;
        let x = input(&mut rng, &[1, 6, dim])?;
        let cond = input(&mut rng, &[1, 6, dim])?;
        out.push(grad_check("film", &store, &[&x, &cond], &mut rng, || {
            film.forward(x.as_tensor(), cond.as_tensor())
        })?);
    }
    {
        let mut store = ParamStore::new(seed, DType::F64);
        let block = MotionBlock::new(&mut store.root().sub("block"), dim, 2)?;
        randomize(&store, &mut rng, |_| false)?;
        let x = input(&mut rng, &[1, 6, dim])?;
        let audio = input(&mut rng, &[1, 6, dim])?;
        let cond = input(&mut rng, &[1, 6, dim])?;
        out.push(grad_check("motion_block", &store, &[&x, &audio, &cond], &mut rng, || {
            block.forward(x.as_tensor(), audio.as_tensor(), cond.as_tensor(), true)
        })?);
    }
    {
        let mut store = ParamStore::new(seed, DType::F64);
        let haa = MmHaa::new(&mut store.root().sub("haa"), 4, 2, 3, 2)?;
        randomize(&store, &mut rng, |_| false)?;
        let x = input(&mut rng, &[2, 4, 4])?;
        let audio = input(&mut rng, &[2, 3, 3])?;
        let masks = soft_masks(&mut rng, 2, 2, 2)?;
        out.push(grad_check("mm_haa", &store, &[&x, &audio], &mut rng, || {
            haa.forward(x.as_tensor(), audio.as_tensor(), &masks, 2, 2)
        })?);
    }
    {
        let cfg = VideoGenConfig {
            clip_len: 2,
            channels: [4, 8, 8],
            heads: 2,
            groups: 2,
            adapter_reduction: 4,
            time_dim: 4,
            audio_dim: 3,
            ..VideoGenConfig::default()
        };
        let mut store = ParamStore::new(seed, DType::F64);
        let block = DenoiseBlock::new(&mut store.root().sub("block"), 4, 8, &cfg)?;
        randomize(&store, &mut rng, |_| false)?;
        let (b, n) = (1, 2);
        let x = input(&mut rng, &[b * n, 4, 2, 2])?;
        let emb = input(&mut rng, &[b * n, cfg.time_dim])?;
        let reference = input(&mut rng, &[b, 4, 8])?;
        let audio = input(&mut rng, &[b * n, 2, cfg.audio_dim])?;
        let masks = soft_masks(&mut rng, b * n, 2, 2)?;
        out.push(grad_check(
            "denoise_block",
            &store,
            &[&x, &emb, &reference, &audio],
            &mut rng,
            || {
                let ctx = BlockContext {
                    batch: b,
                    frames: n,
                    emb: emb.as_tensor(),
                    reference: reference.as_tensor(),
                    audio: audio.as_tensor(),
                    masks: &masks,
                };
                block.forward(x.as_tensor(), &ctx)
            },
        )?);
    }
    Ok(out)
}

fn soft_masks(rng: &mut CounterRng, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let v: Vec<f64> = (0..b * 3 * h * w).map(|_| rng.uniform()).collect();
    Ok(Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu)?)
}

/// Gradient checks plus an attention forward pass against the loop oracle.
pub fn gradient_criterion(seed: u64) -> Result<Outcome> {
    let start = Instant::now();
    let checks = gradient_checks(seed)?;
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let forward = attention_forward_error(seed)?;
    let listing = checks
        .iter()
        .map(|c| format!("{} {:.1e} ({} coords)", c.name, c.rel_error, c.coordinates))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome::new(
        worst < 1e-4 && forward < 1e-12 && elapsed < Duration::from_secs(120),
        format!(
            "{listing}; attention forward vs oracle {forward:.1e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

/// Single-head attention against the loop implementation.
pub fn attention_forward_error(seed: u64) -> Result<f64> {
    let mut rng = CounterRng::labeled(seed, "criteria-attention-forward");
    let (n, m, d) = (5, 7, 6);
    let mut store = ParamStore::new(seed, DType::F64);
    let attn = Attention::new(&mut store.root().sub("attn"), d, d, d, 1)?;
    randomize(&store, &mut rng, |_| false)?;
    let x = Tensor::from_vec(rng.normal_vec(n * d), (1, n, d), &Device::Cpu)?;
    let c = Tensor::from_vec(rng.normal_vec(m * d), (1, m, d), &Device::Cpu)?;
    let got = attn.attend(&x, &c)?.flatten_all()?.to_vec1::<f64>()?;

    let weight = |name: &str| -> Result<Vec<f64>> {
        // stored as out x in; the oracle wants in x out
        let w = values(store.get(name).expect("attention weight"))?;
        let mut t = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                t[j * d + i] = w[i * d + j];
            }
        }
        Ok(t)
    };
    let xs = x.flatten_all()?.to_vec1::<f64>()?;
    let cs = c.flatten_all()?.to_vec1::<f64>()?;
    let q = oracle::matmul(&xs, &weight("attn.q.weight")?, n, d, d);
    let k = oracle::matmul(&cs, &weight("attn.k.weight")?, m, d, d);
    let v = oracle::matmul(&cs, &weight("attn.v.weight")?, m, d, d);
    let want = oracle::attention(&q, &k, &v, n, m, d);
    Ok(oracle::relative_error(&got, &want))
}

// ---------------------------------------------------------------- MM-HAA

fn box_mask(b: usize, h: usize, w: usize, boxes: &[(usize, usize, usize, usize)]) -> Vec<f32> {
    let mut out = vec![0.0f32; b * h * w];
    for (i, &(y0, y1, x0, x1)) in boxes.iter().enumerate() {
        for y in y0..y1 {
            for x in x0..x1 {
                out[(i * h + y) * w + x] = 1.0;
            }
        }
    }
    out
}

fn stack_regions(b: usize, h: usize, w: usize, regions: &[Vec<f32>]) -> Result<Tensor> {
    let mut v = Vec::with_capacity(b * regions.len() * h * w);
    for i in 0..b {
        for r in regions {
            v.extend_from_slice(&r[i * h * w..(i + 1) * h * w]);
        }
    }
    Ok(Tensor::from_vec(v, (b, regions.len(), h, w), &Device::Cpu)?)
}

/// Fresh (identity) adapters with exact partitions give back `Z_CA`; with
/// the lips box inside the face box they give `Z_CA * sum(M)`.
pub fn mm_haa_partition(seed: u64) -> Result<Outcome> {
    let mut rng = CounterRng::labeled(seed, "criteria-mm-haa");
    let (b, c, h, w) = (3, 8, 6, 7);
    let mut store = ParamStore::new(seed, DType::F32);
    let haa = MmHaa::new(&mut store.root().sub("haa"), c, 2, 5, 2)?;
    for (name, var) in store.named() {
        if !name.contains("adapter") {
            let v: Vec<f32> = rng.normal_vec_f32(var.elem_count());
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu)?)?;
        }
    }
    let x = Tensor::from_vec(rng.normal_vec_f32(b * h * w * c), (b, h * w, c), &Device::Cpu)?;
    let audio = Tensor::from_vec(rng.normal_vec_f32(b * 4 * 5), (b, 4, 5), &Device::Cpu)?;
    let tokens = haa.cross_attention(&x, &audio)?;
    let z_ca = tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
    let z: Vec<f32> = z_ca.flatten_all()?.to_vec1()?;

    // random face+hands box, lips inside it, background the complement
    let mut faces = Vec::new();
    let mut lips = Vec::new();
    for _ in 0..b {
        let y0 = rng.below(3) as usize;
        let x0 = rng.below(3) as usize;
        let y1 = y0 + 2 + rng.below((h - y0 - 2) as u64) as usize + 1;
        let x1 = x0 + 2 + rng.below((w - x0 - 2) as u64) as usize + 1;
        let (y1, x1) = (y1.min(h), x1.min(w));
        faces.push((y0, y1, x0, x1));
        lips.push((y0 + 1, y1, x0 + 1, x1));
    }
    let fh = box_mask(b, h, w, &faces);
    let lp = box_mask(b, h, w, &lips);
    let bg: Vec<f32> = fh.iter().map(|v| 1.0 - v).collect();
    let rest: Vec<f32> = fh.iter().zip(&lp).map(|(f, l)| f - l).collect();

    // exact partition: face+hands without the lips, lips, background
    let partition = stack_regions(b, h, w, &[rest, lp.clone(), bg.clone()])?;
    let got: Vec<f32> = mm_haa(&z_ca, &partition, &haa.adapters)?.flatten_all()?.to_vec1()?;
    let partition_exact = got.iter().zip(&z).all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0));
    let through_tokens: Vec<f32> = haa
        .forward(&x, &audio, &partition, h, w)?
        .flatten_all()?
        .to_vec1()?;
    let tokens_flat: Vec<f32> = tokens.flatten_all()?.to_vec1()?;
    let tokens_exact = through_tokens == tokens_flat;

    // lips inside face: overlap counted twice
    let overlap = stack_regions(b, h, w, &[fh.clone(), lp.clone(), bg.clone()])?;
    let got: Vec<f32> = mm_haa(&z_ca, &overlap, &haa.adapters)?.flatten_all()?.to_vec1()?;
    let mut mismatches = 0usize;
    for i in 0..b {
        for ch in 0..c {
            for p in 0..h * w {
                let m = fh[i * h * w + p] + lp[i * h * w + p] + bg[i * h * w + p];
                let idx = (i * c + ch) * h * w + p;
                if got[idx] != z[idx] * m {
                    mismatches += 1;
                }
            }
        }
    }
    let passed = partition_exact && tokens_exact && mismatches == 0;
    Ok(Outcome::new(
        passed,
        format!(
            "partition reproduces Z_CA bitwise {partition_exact}, token path {tokens_exact}, overlap mismatches {mismatches}/{}",
            b * c * h * w
        ),
    ))
}
