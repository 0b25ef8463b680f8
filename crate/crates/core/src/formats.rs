//! 8-bit binary PGM (`P5`) images and masks.
//!
//! Images map `[0, 1]` to `0..=255` by rounding; masks are written as
//! `0`/`255` and read back as `value > 127`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub fn encode_pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maximum value at most 255; comments are
/// allowed in the header.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |pos: &mut usize| -> Result<usize> { token(pos)?.parse().map_err(|_| bad("bad PGM header number")) };
    let w = num(&mut pos)?;
    let h = num(&mut pos)?;
    let maxval = num(&mut pos)?;
    if w == 0 || h == 0 {
        return Err(bad("PGM has zero size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM files are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != h * w {
        return Err(bad("PGM raster size does not match its header"));
    }
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v as f64 / maxval as f64) * 255.0).round().min(255.0) as u8)
            .collect()
    };
    Ok((h, w, pixels))
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Writes a `[1, 1, h, w]` or `[h, w]` image with values clamped to `[0, 1]`.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image.plane_dims()?;
    let px: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write(path, encode_pgm(h, w, &px))
}

/// Reads an image as a `[1, 1, h, w]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let (h, w, px) = read(path)?;
    Tensor::new(vec![1, 1, h, w], px.iter().map(|&v| v as f64 / 255.0).collect())
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write(path, encode_pgm(mask.height(), mask.width(), &px))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, px) = read(path)?;
    BinaryMask::new(h, w, px.iter().map(|&v| v > 127).collect())
}
