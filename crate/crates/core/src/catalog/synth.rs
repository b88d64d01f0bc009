//! Random catalog generator for pipeline runs and tests.

use std::fs;
use std::path::Path;

use rand::Rng;

use super::{CatalogItem, Gender};
use crate::binio::write_atomic;
use crate::data::image::encode_ppm;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// `n` partition keys with distinct categories and cycling genders.
pub fn partition_keys(n: usize) -> Vec<(Gender, String)> {
    (0..n).map(|i| (Gender::ALL[i % 4], format!("cat{i}"))).collect()
}

/// Renders items `start..start + count` into `dir/images`. Item `i` lands in
/// partition `keys[i % keys.len()]`; its image is a few random rectangles on
/// a background whose hue depends on the partition.
pub fn synth_catalog(dir: &Path, start: usize, count: usize, keys: &[(Gender, String)], size: usize, seed: u64) -> Result<Vec<CatalogItem>> {
    if keys.is_empty() {
        return Err(Error::param("need at least one partition key"));
    }
    if size == 0 {
        return Err(Error::param("image size must be >= 1"));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut out = Vec::with_capacity(count);
    for i in start..start + count {
        let part = i % keys.len();
        let mut rng = rng_for(seed, &[i as u64]);
        let plane = size * size;
        let base = [(part * 67 % 256) as f64, (part * 131 % 256) as f64, (part * 29 % 256) as f64];
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            let jitter = rng.gen_range(-30.0..30.0);
            data[c * plane..(c + 1) * plane].fill((base[c] + jitter).clamp(0.0, 255.0));
        }
        for _ in 0..rng.gen_range(1..4) {
            let (x0, y0) = (rng.gen_range(0..size), rng.gen_range(0..size));
            let (x1, y1) = (rng.gen_range(x0..size) + 1, rng.gen_range(y0..size) + 1);
            let color: [f64; 3] = [rng.gen_range(0.0..=255.0), rng.gen_range(0.0..=255.0), rng.gen_range(0.0..=255.0)];
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..3 {
                        data[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
        let img = Tensor::new(vec![3, size, size], data)?;
        let rel = format!("images/item{i:05}.ppm");
        write_atomic(&dir.join(&rel), &encode_ppm(&img)?)?;
        let (gender, category_key) = keys[part].clone();
        out.push(CatalogItem { id: format!("item{i:05}"), image_path: rel, gender, category_key });
    }
    Ok(out)
}
