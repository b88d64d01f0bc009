//! Random flips plus one composed rotation/shear/zoom about the image centre,
//! resampled with nearest-neighbour lookup and edge-clamped ("nearest") fill.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub zoom_range: f64,
    pub shear_range: f64,
    /// Degrees.
    pub rotation_range: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { horizontal_flip: true, vertical_flip: true, zoom_range: 0.2, shear_range: 0.2, rotation_range: 30.0 }
    }
}

impl AugmentSpec {
    /// No-op spec: every draw is the identity transform.
    pub fn identity() -> Self {
        Self { horizontal_flip: false, vertical_flip: false, zoom_range: 0.0, shear_range: 0.0, rotation_range: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("zoom_range", self.zoom_range), ("shear_range", self.shear_range), ("rotation_range", self.rotation_range)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::param(format!("zoom_range {} must be < 1", self.zoom_range)));
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub zoom_x: f64,
    pub zoom_y: f64,
    pub shear: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { flip_h: false, flip_v: false, zoom_x: 1.0, zoom_y: 1.0, shear: 0.0, rotation_deg: 0.0 };
}

/// Draws parameters. The number of draws is fixed regardless of the spec so
/// that a stream stays aligned across differently configured runs.
pub fn sample_params<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> AugmentParams {
    let mut sym = |range: f64| -range + 2.0 * range * rng.gen::<f64>();
    let zoom_x = 1.0 + sym(spec.zoom_range);
    let zoom_y = 1.0 + sym(spec.zoom_range);
    let shear = sym(spec.shear_range);
    let rotation_deg = sym(spec.rotation_range);
    let flip_h = rng.gen_bool(0.5) && spec.horizontal_flip;
    let flip_v = rng.gen_bool(0.5) && spec.vertical_flip;
    AugmentParams { flip_h, flip_v, zoom_x, zoom_y, shear, rotation_deg }
}

pub fn augment<R: Rng + ?Sized>(img: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    apply_augment(img, &sample_params(spec, rng))
}

/// Applies flips, then maps each output pixel through
/// `rotation * shear * zoom` (about the centre) to its source pixel.
pub fn apply_augment(img: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(Error::dim("augment", format!("expected [C, H, W], got {:?}", img.shape())));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    // rotation * shear * zoom, acting on (x, y) offsets from the centre.
    let (zx, zy, sh) = (params.zoom_x, params.zoom_y, params.shear);
    let m = [
        [cos * zx, (cos * sh - sin) * zy],
        [sin * zx, (sin * sh + cos) * zy],
    ];
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 - cx, y as f64 - cy);
            let sx = (m[0][0] * u + m[0][1] * v + cx).round().clamp(0.0, (w - 1) as f64) as usize;
            let sy = (m[1][0] * u + m[1][1] * v + cy).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = if params.flip_h { w - 1 - sx } else { sx };
            let sy = if params.flip_v { h - 1 - sy } else { sy };
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn identity_params_leave_image_unchanged() {
        let img = ramp(3, 7, 6);
        assert_eq!(apply_augment(&img, &AugmentParams::IDENTITY).unwrap(), img);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &AugmentSpec::identity(), &mut rng).unwrap(), img);
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let img = ramp(3, 4, 5);
        let out = apply_augment(&img, &AugmentParams { flip_h: true, ..AugmentParams::IDENTITY }).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(out.data()[(c * 4 + y) * 5 + x], img.data()[(c * 4 + y) * 5 + (4 - x)]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let img = ramp(3, 16, 16);
        let spec = AugmentSpec::default();
        let a = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment(&img, &spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = AugmentSpec::default();
        for _ in 0..1000 {
            let p = sample_params(&spec, &mut rng);
            assert!((0.8..=1.2).contains(&p.zoom_x) && (0.8..=1.2).contains(&p.zoom_y));
            assert!(p.shear.abs() <= 0.2 && p.rotation_deg.abs() <= 30.0);
        }
    }

    proptest! {
        #[test]
        fn output_shape_matches_input(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
            let img = ramp(3, h, w);
            let out = augment(&img, &AugmentSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
        }
    }
}
