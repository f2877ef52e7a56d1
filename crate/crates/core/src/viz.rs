//! Grayscale export of activation maps as binary PGM images.

use std::fs;
use std::path::Path;

use crate::data::bilinear_resize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max scale an `H×W` map to `[0, 255]`. A constant map becomes zeros.
pub fn normalize_map(map: &Tensor<f32>) -> Result<Vec<f32>> {
    if map.ndim() != 2 {
        return Err(Error::Dimension {
            op: "normalize_map",
            lhs: map.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !map.is_finite() {
        return Err(Error::data("activation map contains non-finite values"));
    }
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi == lo {
        return Ok(vec![0.0; map.numel()]);
    }
    Ok(map.data().iter().map(|&v| (v - lo) / (hi - lo) * 255.0).collect())
}

/// Normalise, upscale bilinearly to `out_h×out_w` and quantise.
pub fn render_map(map: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
    let scaled = normalize_map(map)?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let up = bilinear_resize(&scaled, 1, h, w, out_h, out_w);
    Ok(up.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect())
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Write `map` as a `size×size` PGM.
pub fn export_activation_map(map: &Tensor<f32>, size: usize, path: impl AsRef<Path>) -> Result<()> {
    let pixels = render_map(map, size, size)?;
    fs::write(path, encode_pgm(size, size, &pixels))?;
    Ok(())
}
