use std::fs;
use std::path::Path;

use image::imageops::{resize, FilterType};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Read `root/<class>/*.ppm` into a dataset of `size×size` RGB images.
/// Labels follow the sorted order of the class directory names, which are
/// returned alongside.
pub fn load_ppm_dir(root: impl AsRef<Path>, size: usize) -> Result<(Dataset, Vec<String>)> {
    let mut classes: Vec<String> = fs::read_dir(root.as_ref())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::data(format!("no class directories under {}", root.as_ref().display())));
    }
    let mut samples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.as_ref().join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::data(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let img = if img.width() as usize == size && img.height() as usize == size {
                img
            } else {
                resize(&img, size as u32, size as u32, FilterType::Triangle)
            };
            samples.push(Sample {
                image: img.into_raw(),
                label: label as u16,
            });
        }
    }
    Ok((Dataset::new(size, size, 3, samples)?, classes))
}
