//! Desk-scale synthetic triplet set: one coloured shape on a tinted
//! background per image, with shape and hue determined by class.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::image::encode_ppm;
use super::manifest::{write_manifest, Source, Split, TripletRecord};
use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub triplets: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Trailing share of triplets marked `val`.
    pub val_fraction: f64,
    /// Share of negatives drawn from the query's own class with the hue
    /// rotated half-way round the wheel.
    pub far_hue_fraction: f64,
    /// Share of queries rendered as noisy "wild" photos.
    pub wild_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { triplets: 500, classes: 3, image_size: 32, val_fraction: 0.2, far_hue_fraction: 0.2, wild_fraction: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Circle,
    Stripes,
}

/// Label attached to every rendered image (for oracle checks).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub path: String,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub records: Vec<TripletRecord>,
    /// Query and positive images with their class.
    pub labelled: Vec<SynthImage>,
}

pub fn class_name(class: usize) -> String {
    format!("class{class}")
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Renders one image of `class`; `hue_shift` rotates the class hue in degrees.
fn render<R: Rng + ?Sized>(class: usize, classes: usize, size: usize, hue_shift: f64, noisy: bool, rng: &mut R) -> Tensor {
    let shape = [Shape::Square, Shape::Circle, Shape::Stripes][class % 3];
    let hue = class as f64 * 360.0 / classes as f64 + hue_shift + rng.gen_range(-8.0..8.0);
    let fg = hsv_to_rgb(hue, rng.gen_range(0.7..0.9), rng.gen_range(0.8..1.0));
    let bg = hsv_to_rgb(hue, 0.3, rng.gen_range(0.2..0.3));
    let s = size as f64;
    let half = rng.gen_range(0.25..0.35) * s;
    let cx = rng.gen_range(half..s - half);
    let cy = rng.gen_range(half..s - half);
    let period = rng.gen_range(3..6) as f64;
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match shape {
                Shape::Square => dx.abs() <= half && dy.abs() <= half,
                Shape::Circle => dx * dx + dy * dy <= half * half,
                Shape::Stripes => dx.abs() <= half && dy.abs() <= half && ((x as f64 / period) as i64) % 2 == 0,
            };
            let color = if inside { fg } else { bg };
            for c in 0..3 {
                let noise = if noisy { rng.gen_range(-20.0..20.0) } else { 0.0 };
                data[c * plane + y * size + x] = (color[c] + noise).round().clamp(0.0, 255.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape matches data")
}

/// Writes images under `out_dir/images` and `out_dir/manifest.jsonl`.
/// Each triplet gets three fresh images so no image is shared across splits.
pub fn synth_generate(out_dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    if cfg.classes < 2 {
        return Err(Error::param(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.image_size == 0 {
        return Err(Error::param("image_size must be >= 1"));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let n_val = (cfg.triplets as f64 * cfg.val_fraction).round() as usize;
    let mut records = Vec::with_capacity(cfg.triplets);
    let mut labelled = Vec::with_capacity(2 * cfg.triplets);
    for t in 0..cfg.triplets {
        let mut rng = rng_for(seed, &[t as u64]);
        let class = rng.gen_range(0..cfg.classes);
        let wild = rng.gen_bool(cfg.wild_fraction);
        let far_hue = rng.gen_bool(cfg.far_hue_fraction);
        let (neg_class, neg_shift) = if far_hue {
            (class, 180.0)
        } else {
            let other = rng.gen_range(0..cfg.classes - 1);
            (if other >= class { other + 1 } else { other }, 0.0)
        };
        let write = |role: &str, class: usize, shift: f64, noisy: bool, rng: &mut _| -> Result<String> {
            let rel = format!("images/t{t:05}_{role}.ppm");
            let img = render(class, cfg.classes, cfg.image_size, shift, noisy, rng);
            let path = out_dir.join(&rel);
            write_atomic(&path, &encode_ppm(&img)?)?;
            Ok(rel)
        };
        let q = write("q", class, 0.0, wild, &mut rng)?;
        let p = write("p", class, 0.0, false, &mut rng)?;
        let n = write("n", neg_class, neg_shift, false, &mut rng)?;
        labelled.push(SynthImage { path: q.clone(), class });
        labelled.push(SynthImage { path: p.clone(), class });
        records.push(TripletRecord {
            q_path: q,
            p_path: p,
            n_path: n,
            category_key: class_name(class),
            q_source: if wild { Source::Wild } else { Source::Catalog },
            in_class: neg_class == class,
            split: Some(if t + n_val >= cfg.triplets { Split::Val } else { Split::Train }),
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &records)?;
    Ok(SynthOutput { manifest_path, records, labelled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::read_image;
    use crate::data::manifest::load_manifest;

    #[test]
    fn zero_triplets_give_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(dir.path(), &SynthConfig { triplets: 0, ..Default::default() }, 1).unwrap();
        assert!(out.records.is_empty());
        assert!(load_manifest(&out.manifest_path).unwrap().is_empty());
    }

    #[test]
    fn rejects_single_class() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(dir.path(), &SynthConfig { classes: 1, ..Default::default() }, 1).is_err());
    }

    #[test]
    fn triplets_respect_class_structure() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(dir.path(), &SynthConfig { triplets: 60, ..Default::default() }, 3).unwrap();
        let labels: std::collections::HashMap<_, _> = out.labelled.iter().map(|l| (l.path.clone(), l.class)).collect();
        for r in &out.records {
            assert_eq!(labels[&r.q_path], labels[&r.p_path]);
            // same-class negatives are hue-rotated; other negatives change class
            assert!(r.in_class || r.n_path.ends_with("_n.ppm"));
        }
        assert_eq!(load_manifest(&out.manifest_path).unwrap(), out.records);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { triplets: 5, ..Default::default() };
        synth_generate(a.path(), &cfg, 9).unwrap();
        synth_generate(b.path(), &cfg, 9).unwrap();
        for t in 0..5 {
            let rel = format!("images/t{t:05}_n.ppm");
            assert_eq!(read_image(&a.path().join(&rel)).unwrap(), read_image(&b.path().join(&rel)).unwrap());
        }
    }
}
