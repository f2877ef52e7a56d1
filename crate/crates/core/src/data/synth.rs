use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Horizontal glyph regions per image.
pub const SLOTS: usize = 3;
/// Shapes available to every slot.
pub const VOCAB: usize = 4;
pub const GLYPH_SIZE: usize = 14;

/// Parameters of the synthetic multi-part images.
///
/// Every class is a triple of glyphs, one per slot. Classes come in pairs
/// sharing the slot-0 glyph, so the most salient region alone never decides
/// the class; the fainter slots 1 and 2 must be read as well.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub size: usize,
    /// Background grey level.
    pub background: u8,
    /// Intensity added by a glyph in slots 1 and 2. Slot 0 uses twice this.
    pub contrast: u8,
    /// Half-width of the additive uniform pixel noise.
    pub noise: u8,
    /// Maximum glyph displacement in pixels along each axis.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            size: 64,
            background: 128,
            contrast: 48,
            noise: 40,
            jitter: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 2 * VOCAB * VOCAB {
            return Err(Error::config(format!(
                "num_classes must lie in 2..={}, got {}",
                2 * VOCAB * VOCAB,
                self.num_classes
            )));
        }
        if self.num_classes % 2 != 0 {
            return Err(Error::config("num_classes must be even so classes pair up on slot 0"));
        }
        let slot_w = self.size / SLOTS;
        if slot_w < GLYPH_SIZE + 2 * self.jitter || self.size < GLYPH_SIZE + 2 * self.jitter {
            return Err(Error::config(format!(
                "image size {} too small for {SLOTS} glyphs with jitter {}",
                self.size, self.jitter
            )));
        }
        if self.background as u32 + 2 * self.contrast as u32 > 255 {
            return Err(Error::config("background + 2*contrast exceeds 255"));
        }
        Ok(())
    }
}

/// Glyph index per slot for `class`. Classes `2m` and `2m+1` share slot 0.
pub fn class_glyphs(class: usize) -> [usize; SLOTS] {
    let (m, r) = (class / 2, class % 2);
    let q = m / VOCAB;
    [m % VOCAB, (q + r) % VOCAB, (q + 2 * r) % VOCAB]
}

/// Binary `GLYPH_SIZE²` mask: filled square, ring, plus, cross.
pub fn glyph_mask(g: usize) -> Vec<bool> {
    let n = GLYPH_SIZE as isize;
    let mut m = Vec::with_capacity(GLYPH_SIZE * GLYPH_SIZE);
    for y in 0..n {
        for x in 0..n {
            let inside = (1..n - 1).contains(&x) && (1..n - 1).contains(&y);
            let on = match g {
                0 => inside,
                1 => inside && !((4..n - 4).contains(&x) && (4..n - 4).contains(&y)),
                2 => (2 * x - (n - 1)).abs() < 4 || (2 * y - (n - 1)).abs() < 4,
                3 => (x - y).abs() < 2 || (x + y - (n - 1)).abs() < 2,
                _ => panic!("glyph index {g} out of range"),
            };
            m.push(on);
        }
    }
    m
}

/// Top-left corner of slot `s` before jitter.
pub fn slot_origin(size: usize, s: usize) -> (usize, usize) {
    let cx = (2 * s + 1) * size / (2 * SLOTS);
    (size / 2 - GLYPH_SIZE / 2, cx - GLYPH_SIZE / 2)
}

fn render(spec: &SynthSpec, label: usize, rng: &mut impl Rng) -> Vec<u8> {
    let n = spec.size;
    let mut gray = vec![spec.background as i32; n * n];
    for (s, &g) in class_glyphs(label).iter().enumerate() {
        let amp = spec.contrast as i32 * if s == 0 { 2 } else { 1 };
        let (oy, ox) = slot_origin(n, s);
        let j = spec.jitter as isize;
        let dy = rng.gen_range(-j..=j);
        let dx = rng.gen_range(-j..=j);
        let (oy, ox) = ((oy as isize + dy) as usize, (ox as isize + dx) as usize);
        for (i, &on) in glyph_mask(g).iter().enumerate() {
            if on {
                gray[(oy + i / GLYPH_SIZE) * n + ox + i % GLYPH_SIZE] += amp;
            }
        }
    }
    let noise = spec.noise as i32;
    let mut image = Vec::with_capacity(n * n * 3);
    for &v in &gray {
        for _ in 0..3 {
            let e = if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 };
            image.push((v + e).clamp(0, 255) as u8);
        }
    }
    image
}

/// `count` samples with labels assigned round-robin. Sample `i` draws from
/// its own stream seeded with `seed ^ i`, so generation is order-free.
pub fn synth_generate(spec: &SynthSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count < spec.num_classes {
        return Err(Error::usage(format!(
            "count {count} is below the class count {}",
            spec.num_classes
        )));
    }
    let samples: Vec<Sample> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ i as u64);
            let label = i % spec.num_classes;
            Sample {
                image: render(spec, label, &mut rng),
                label: label as u16,
            }
        })
        .collect();
    Dataset::new(spec.size, spec.size, 3, samples)
}
