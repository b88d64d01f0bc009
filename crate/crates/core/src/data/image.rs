//! Binary PPM (P6) / PGM (P5) codec and nearest-neighbour resizing.

use std::path::Path;

use crate::binio::read_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes P6 or P5 (replicated to three channels) into `[3, H, W]` values in `[0, 255]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos, "magic")?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::format("magic", format!("expected P6 or P5, found {:?}", String::from_utf8_lossy(other))))
        }
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format("maxval", format!("only 255 is supported, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("dimensions", format!("{width}x{height} image")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("header", "missing whitespace before raster"));
    }
    pos += 1;
    let plane = width * height;
    let raster = &bytes[pos..];
    if raster.len() < plane * channels {
        return Err(Error::format(
            "raster",
            format!("truncated: need {} bytes, found {}", plane * channels, raster.len()),
        ));
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels == 3 { raster[i * 3 + c] } else { raster[i] };
            data[c * plane + i] = src as f64;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, field: &str) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(field, "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = header_token(bytes, pos, field)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(field, format!("not a number: {:?}", String::from_utf8_lossy(tok))))
}

/// Encodes `[3, H, W]` as P6, rounding and clamping values to `0..=255`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::dim("encode_ppm", format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = img.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(d[c * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&read_file(path)?).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(field, format!("{}: {detail}", path.display())),
        other => other,
    })
}

/// Nearest-neighbour resize to `size x size`, then scale by 1/255.
pub fn resize_normalize(img: &Tensor, size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::param("target size must be >= 1"));
    }
    if img.rank() != 3 {
        return Err(Error::dim("resize_normalize", format!("expected [C, H, W], got {:?}", img.shape())));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let sy = y * h / size;
            for x in 0..size {
                let sx = x * w / size;
                out.push(src[(ch * h + sy) * w + sx] / 255.0);
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn decodes_p6() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(&t.data()[0..2], &[255.0, 0.0]);
        assert_eq!(&t.data()[4..6], &[0.0, 255.0]);
    }

    #[test]
    fn decodes_p5_with_comment() {
        let mut bytes = b"P5 # gray\n1 1\n255\n".to_vec();
        bytes.push(7);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_image(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_image(b"P6\n2 2\n255\n\x00\x00").is_err());
        let err = decode_image(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("maxval"));
    }

    #[test]
    fn resize_cases() {
        let white = Tensor::full(&[3, 5, 7], 255.0);
        assert!(resize_normalize(&white, 4).unwrap().data().iter().all(|&v| v == 1.0));

        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 51.0, 102.0, 255.0]).unwrap();
        let same = resize_normalize(&img, 2).unwrap();
        assert_eq!(same.data(), &[0.0, 0.2, 0.4, 1.0]);

        let up = resize_normalize(&img, 4).unwrap();
        let d = up.data();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(d[y * 4 + x], img.data()[(y / 2) * 2 + x / 2] / 255.0);
            }
        }
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut state = seed;
            let data: Vec<f64> = (0..3 * w * h).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as f64
            }).collect();
            let img = Tensor::new(vec![3, h, w], data).unwrap();
            prop_assert_eq!(decode_image(&encode_ppm(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn resize_stays_in_unit_range(w in 1usize..12, h in 1usize..12, s in 1usize..20, v in 0u8..=255) {
            let img = Tensor::full(&[3, h, w], v as f64);
            let out = resize_normalize(&img, s).unwrap();
            prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
