use rand::Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry and normalisation of the input pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Square side the image is resized to before cropping.
    pub resize: usize,
    pub crop: usize,
    pub mean: f32,
    pub std: f32,
    pub flip_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize: 72,
            crop: 64,
            mean: 0.5,
            std: 0.25,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No resize and no crop for images that already have the model's size.
    pub fn passthrough(size: usize) -> Self {
        Self {
            resize: size,
            crop: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::config(format!(
                "crop {} must be positive and at most resize {}",
                self.crop, self.resize
            )));
        }
        if !(self.std > 0.0) || !self.mean.is_finite() {
            return Err(Error::config("normalisation std must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Offset of the deterministic evaluation crop.
    pub fn center_offset(&self) -> (usize, usize) {
        let o = (self.resize - self.crop) / 2;
        (o, o)
    }
}

/// Bilinear resampling of a `C×H×W` plane stack with half-pixel centres and
/// clamped borders. Resizing to the same extent is the identity.
pub fn bilinear_resize(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let x = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let p = |y: usize, x: usize| plane[y * w + x];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

/// Mirror every row of a `C×H×W` tensor.
pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = *t.shape().last().unwrap();
    let mut out = t.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

/// `HWC` u8 to `C×H×W` values in `[0, 1]`, resized to `cfg.resize`.
fn to_planes(img: Image<'_>, cfg: &AugmentConfig) -> Vec<f32> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut planes = vec![0.0f32; c * h * w];
    for (p, px) in img.data.chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            planes[ch * h * w + p] = v as f32 / 255.0;
        }
    }
    if h == cfg.resize && w == cfg.resize {
        planes
    } else {
        bilinear_resize(&planes, c, h, w, cfg.resize, cfg.resize)
    }
}

fn crop_normalise(planes: &[f32], c: usize, cfg: &AugmentConfig, top: usize, left: usize) -> Tensor<f32> {
    let (r, k) = (cfg.resize, cfg.crop);
    let mut out = Vec::with_capacity(c * k * k);
    for plane in planes.chunks(r * r) {
        for y in top..top + k {
            out.extend(plane[y * r + left..y * r + left + k].iter().map(|&v| (v - cfg.mean) / cfg.std));
        }
    }
    Tensor::new(vec![c, k, k], out).expect("crop geometry")
}

/// Resize, random crop, random horizontal flip, normalise.
pub fn augment_train(img: Image<'_>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor<f32> {
    let planes = to_planes(img, cfg);
    let span = cfg.resize - cfg.crop;
    let top = rng.gen_range(0..=span);
    let left = rng.gen_range(0..=span);
    let t = crop_normalise(&planes, img.channels, cfg, top, left);
    if rng.gen_bool(cfg.flip_prob as f64) {
        flip_horizontal(&t)
    } else {
        t
    }
}

/// Resize, centre crop, normalise.
pub fn augment_eval(img: Image<'_>, cfg: &AugmentConfig) -> Tensor<f32> {
    let planes = to_planes(img, cfg);
    let (top, left) = cfg.center_offset();
    crop_normalise(&planes, img.channels, cfg, top, left)
}
