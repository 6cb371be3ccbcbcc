//! Static PNG plots drawn directly into an RGB buffer.

use image::{Rgb, RgbImage};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
pub const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

const MARGIN: i64 = 24;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn axes(img: &mut RgbImage) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    line(img, (MARGIN, MARGIN / 2), (MARGIN, h - MARGIN), AXIS);
    line(img, (MARGIN, h - MARGIN), (w - MARGIN / 2, h - MARGIN), AXIS);
}

/// Line chart of several series sharing the x axis; y is log-scaled when
/// every value is positive.
pub fn line_chart(series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BG);
    axes(&mut img);
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let log = series.iter().flatten().all(|&v| v > 0.0);
    let tf = |v: f64| if log { v.ln() } else { v };
    let (lo, hi) = finite.map(tf).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = (width as i64 - MARGIN - MARGIN / 2, height as i64 - MARGIN - MARGIN / 2);
    for (k, s) in series.iter().enumerate() {
        let n = s.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            let x = MARGIN + (i as f64 / n as f64 * pw as f64).round() as i64;
            let y = height as i64 - MARGIN - ((tf(v) - lo) / span * ph as f64).round() as i64;
            (x, y)
        };
        let colour = PALETTE[k % PALETTE.len()];
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = pt(i, v);
            if let Some(q) = prev {
                line(&mut img, q, p, colour);
            } else {
                put(&mut img, p.0, p.1, colour);
            }
            prev = Some(p);
        }
    }
    img
}

/// Bars scaled to the largest value.
pub fn bar_chart(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BG);
    axes(&mut img);
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if values.is_empty() || max <= 0.0 {
        return img;
    }
    let pw = width as i64 - MARGIN - MARGIN / 2;
    let ph = (height as i64 - MARGIN - MARGIN / 2) as f64;
    let slot = pw / values.len() as i64;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || v <= 0.0 {
            continue;
        }
        let top = height as i64 - MARGIN - (v / max * ph).round() as i64;
        let x0 = MARGIN + i as i64 * slot + slot / 5;
        let x1 = MARGIN + (i as i64 + 1) * slot - slot / 5;
        for x in x0..x1 {
            line(&mut img, (x, top), (x, height as i64 - MARGIN - 1), PALETTE[i % PALETTE.len()]);
        }
    }
    img
}

/// Square matrix as a white-to-blue heatmap, one `cell` x `cell` block per
/// entry.
pub fn heatmap(values: &[Vec<f64>], cell: u32) -> RgbImage {
    let n = values.len() as u32;
    let mut img = RgbImage::from_pixel((n * cell).max(1), (n * cell).max(1), BG);
    let max = values.iter().flatten().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return img;
    }
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let a = (v / max).clamp(0.0, 1.0);
            let c = Rgb([
                (255.0 * (1.0 - a)) as u8,
                (255.0 * (1.0 - 0.7 * a)) as u8,
                255,
            ]);
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, i as u32 * cell + dy, c);
                }
            }
        }
    }
    img
}

/// Frames side by side.
pub fn strip(frames: &[RgbImage]) -> RgbImage {
    let (w, h) = frames.first().map_or((1, 1), |f| (f.width(), f.height()));
    let mut img = RgbImage::from_pixel(w * frames.len().max(1) as u32, h, BG);
    for (k, f) in frames.iter().enumerate() {
        image::imageops::replace(&mut img, f, (k as u32 * w) as i64, 0);
    }
    img
}
