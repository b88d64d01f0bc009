//! sRGB to CIELAB (D65) and the 540-bin LAB histogram.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINS_PER_CHANNEL: usize = 180;
pub const HISTOGRAM_DIM: usize = 3 * BINS_PER_CHANNEL;

const XN: f64 = 0.95047;
const YN: f64 = 1.0;
const ZN: f64 = 1.08883;

fn linearize(c: f64) -> f64 {
    let c = c / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Channel values must lie in `[0, 255]`.
pub fn rgb_to_lab(r: f64, g: f64, b: f64) -> Result<[f64; 3]> {
    for (name, v) in [("r", r), ("g", g), ("b", b)] {
        if !(0.0..=255.0).contains(&v) {
            return Err(Error::param(format!("channel {name} = {v} outside [0, 255]")));
        }
    }
    let (r, g, b) = (linearize(r), linearize(g), linearize(b));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / XN), lab_f(y / YN), lab_f(z / ZN));
    Ok([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
}

fn bin(v: f64, lo: f64, hi: f64) -> usize {
    let t = ((v - lo) / (hi - lo) * BINS_PER_CHANNEL as f64).floor();
    t.clamp(0.0, (BINS_PER_CHANNEL - 1) as f64) as usize
}

/// Three 180-bin histograms (L over [0, 100], a and b over [-128, 127]),
/// each normalized to sum 1, concatenated in L, a, b order. Input values
/// are in `[0, 255]`.
pub fn lab_histogram(img: &Tensor) -> Result<Vec<f64>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::dim("lab_histogram", format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data();
    let mut counts = vec![0u64; HISTOGRAM_DIM];
    for i in 0..plane {
        let [l, a, b] = rgb_to_lab(d[i], d[plane + i], d[2 * plane + i])?;
        counts[bin(l, 0.0, 100.0)] += 1;
        counts[BINS_PER_CHANNEL + bin(a, -128.0, 127.0)] += 1;
        counts[2 * BINS_PER_CHANNEL + bin(b, -128.0, 127.0)] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / plane as f64).collect())
}
