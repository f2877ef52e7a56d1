//! Samples, the synthetic multi-part generator, the binary dataset container,
//! PPM ingestion and the crop/flip augmentation recipe.

mod augment;
mod format;
mod ppm;
mod synth;

pub use augment::{augment_eval, augment_train, bilinear_resize, flip_horizontal, AugmentConfig};
pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, HEADER_LEN, MAGIC, VERSION};
pub use ppm::load_ppm_dir;
pub use synth::{class_glyphs, glyph_mask, slot_origin, synth_generate, SynthSpec, GLYPH_SIZE, SLOTS, VOCAB};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `H×W×C` u8 image and its class.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub image: Vec<u8>,
    pub label: u16,
}

/// Samples sharing one image geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<Sample>) -> Result<Self> {
        let n = height * width * channels;
        if let Some(i) = samples.iter().position(|s| s.image.len() != n) {
            return Err(Error::data(format!(
                "sample {i} has {} bytes, expected {height}x{width}x{channels}",
                samples[i].image.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    /// Split off the trailing `n` samples.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::data(format!(
                "cannot hold out {n} of {} samples",
                self.len()
            )));
        }
        let tail = self.samples.split_off(self.len() - n);
        let (h, w, c) = (self.height, self.width, self.channels);
        Ok((self, Dataset::new(h, w, c, tail)?))
    }

    pub fn image(&self, i: usize) -> Image<'_> {
        Image {
            data: &self.samples[i].image,
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }
}

/// Borrowed `H×W×C` u8 image.
#[derive(Clone, Copy, Debug)]
pub struct Image<'a> {
    pub data: &'a [u8],
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Stack `C×H×W` tensors into one `B×C×H×W` batch.
pub fn stack(items: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::usage("cannot stack an empty batch"))?
        .shape()
        .to_vec();
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&first);
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in items {
        if t.shape() != first.as_slice() {
            return Err(Error::Dimension {
                op: "stack",
                lhs: first,
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}
