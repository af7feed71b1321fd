//! Binary PPM (P6) output.

use std::path::Path;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encodes an `[3,H,W]` image in `[0,1]`.
pub fn encode_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = *image.shape() else {
        return Err(shape_err("ppm", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Encodes a row-major `h×w` map in `[0,1]` as gray triples, byte = round(255·v).
pub fn encode_gray(values: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(shape_err("ppm", format!("{} values for {h}x{w}", values.len())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in values {
        let b = to_byte(v);
        out.extend_from_slice(&[b, b, b]);
    }
    Ok(out)
}

pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_rgb(image)?)?;
    Ok(())
}

pub fn write_gray(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    std::fs::write(path, encode_gray(values, h, w)?)?;
    Ok(())
}
