//! Engineered baseline features: structure, pattern and LAB colour, fused by
//! a weighted sum of per-block scaled Euclidean distances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{lab_histogram, HISTOGRAM_DIM};
use crate::data::image::resize_normalize;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const STRUCTURE_DIM: usize = 2048;
pub const PATTERN_DIM: usize = 1024;
pub const FUSED_DIM: usize = STRUCTURE_DIM + PATTERN_DIM + HISTOGRAM_DIM;

/// A pluggable image feature extractor. Input values are in `[0, 255]`.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, img: &Tensor) -> Result<Vec<f64>>;
}

/// Fixed seeded random projection of a downsampled view of the image.
pub struct RandomProjection {
    side: usize,
    out_dim: usize,
    view: View,
    /// Row-major `out_dim x inputs`.
    matrix: Vec<f64>,
}

#[derive(Clone, Copy)]
enum View {
    /// RGB pixels.
    Pixels,
    /// Horizontal and vertical grey-level differences.
    Gradients,
}

impl RandomProjection {
    fn new(view: View, side: usize, out_dim: usize, seed: u64, tag: u64) -> Self {
        let inputs = match view {
            View::Pixels => 3 * side * side,
            View::Gradients => 2 * side * side,
        };
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut rng = rng_for(seed, &[tag]);
        let matrix = (0..out_dim * inputs).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { side, out_dim, view, matrix }
    }

    /// Structure stand-in: 2048 projections of 16x16 RGB.
    pub fn structure(seed: u64) -> Self {
        Self::new(View::Pixels, 16, STRUCTURE_DIM, seed, 0x5354)
    }

    /// Pattern stand-in: 1024 projections of 16x16 grey-level gradients.
    pub fn pattern(seed: u64) -> Self {
        Self::new(View::Gradients, 16, PATTERN_DIM, seed, 0x5041)
    }

    fn inputs(&self, img: &Tensor) -> Result<Vec<f64>> {
        let small = resize_normalize(img, self.side)?;
        if small.shape()[0] != 3 {
            return Err(Error::dim("extractor", format!("expected 3 channels, got {:?}", img.shape())));
        }
        let s = self.side;
        let d = small.data();
        Ok(match self.view {
            View::Pixels => d.to_vec(),
            View::Gradients => {
                let grey: Vec<f64> = (0..s * s).map(|i| (d[i] + d[s * s + i] + d[2 * s * s + i]) / 3.0).collect();
                let mut out = Vec::with_capacity(2 * s * s);
                for y in 0..s {
                    for x in 0..s {
                        out.push(grey[y * s + (x + 1).min(s - 1)] - grey[y * s + x]);
                    }
                }
                for y in 0..s {
                    for x in 0..s {
                        out.push(grey[(y + 1).min(s - 1) * s + x] - grey[y * s + x]);
                    }
                }
                out
            }
        })
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.out_dim
    }

    fn extract(&self, img: &Tensor) -> Result<Vec<f64>> {
        let x = self.inputs(img)?;
        Ok(self.matrix.chunks(x.len()).map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum()).collect())
    }
}

pub struct Extractors {
    pub structure: Box<dyn FeatureExtractor>,
    pub pattern: Box<dyn FeatureExtractor>,
}

impl Extractors {
    pub fn stub(seed: u64) -> Self {
        Self { structure: Box::new(RandomProjection::structure(seed)), pattern: Box::new(RandomProjection::pattern(seed)) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub structure: Vec<f64>,
    pub pattern: Vec<f64>,
    pub color: Vec<f64>,
}

impl FusedFeature {
    pub fn validate(&self) -> Result<()> {
        for (name, v, want) in [
            ("structure", &self.structure, STRUCTURE_DIM),
            ("pattern", &self.pattern, PATTERN_DIM),
            ("color", &self.color, HISTOGRAM_DIM),
        ] {
            if v.len() != want {
                return Err(Error::dim("fused feature", format!("{name} has {} values, expected {want}", v.len())));
            }
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [&self.structure[..], &self.pattern, &self.color].concat()
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != FUSED_DIM {
            return Err(Error::dim("fused feature", format!("{} values, expected {FUSED_DIM}", v.len())));
        }
        Ok(Self {
            structure: v[..STRUCTURE_DIM].to_vec(),
            pattern: v[STRUCTURE_DIM..STRUCTURE_DIM + PATTERN_DIM].to_vec(),
            color: v[STRUCTURE_DIM + PATTERN_DIM..].to_vec(),
        })
    }

    /// Rounds every component to f32, the precision of the feature cache.
    pub fn quantized(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
        Self { structure: q(&self.structure), pattern: q(&self.pattern), color: q(&self.color) }
    }
}

/// Extracts all three blocks from an image with values in `[0, 255]`.
pub fn extract_fused(img: &Tensor, extractors: &Extractors) -> Result<FusedFeature> {
    let f = FusedFeature {
        structure: extractors.structure.extract(img)?,
        pattern: extractors.pattern.extract(img)?,
        color: lab_histogram(img)?,
    };
    f.validate()?;
    Ok(f)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub structure: f64,
    pub pattern: f64,
    pub color: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { structure: 0.5, pattern: 0.3, color: 0.2 }
    }
}

impl FusionWeights {
    pub fn normalized(&self) -> Result<[f64; 3]> {
        let w = [self.structure, self.pattern, self.color];
        let total: f64 = w.iter().sum();
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || total <= 0.0 {
            return Err(Error::param(format!("fusion weights {w:?} must be non-negative with a positive sum")));
        }
        Ok(w.map(|v| v / total))
    }
}

fn block_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() / (a.len() as f64).sqrt()
}

pub fn fused_distance(a: &FusedFeature, b: &FusedFeature, w: &FusionWeights) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let [ws, wp, wc] = w.normalized()?;
    Ok(fused_distance_unchecked(a, b, [ws, wp, wc]))
}

pub(crate) fn fused_distance_unchecked(a: &FusedFeature, b: &FusedFeature, w: [f64; 3]) -> f64 {
    w[0] * block_distance(&a.structure, &b.structure)
        + w[1] * block_distance(&a.pattern, &b.pattern)
        + w[2] * block_distance(&a.color, &b.color)
}
