//! Per-class image directories to an `LFMC` container.
//!
//! The input directory holds one subdirectory per class; classes are
//! numbered in sorted name order. Images are decoded as 8-bit grayscale and
//! mapped to `[-1, 1]`.

use std::path::{Path, PathBuf};

use lfm_autodiff::Tensor;
use lfm_core::data::{save_binary, LabeledImageSet};

use crate::error::{HarnessError, Result};

const EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pbm", "pnm"];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvertReport {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            HarnessError::Usage(format!("directory not found: {}", dir.display()))
        }
        _ => HarnessError::io(dir, e),
    })?;
    let mut out = Vec::new();
    for entry in rd {
        out.push(entry.map_err(|e| HarnessError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

pub fn cmd_convert(input: &Path, output: &Path) -> Result<ConvertReport> {
    let class_dirs: Vec<PathBuf> = sorted_entries(input)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.len() < 2 {
        return Err(HarnessError::Usage(format!(
            "{} needs at least two class subdirectories, found {}",
            input.display(),
            class_dirs.len()
        )));
    }
    let mut shape: Option<(usize, usize)> = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    let mut counts = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut count = 0;
        for file in sorted_entries(dir)? {
            let ext = file
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let img = image::open(&file)
                .map_err(|e| HarnessError::Runtime(format!("{}: {e}", file.display())))?
                .into_luma8();
            let dims = (img.height() as usize, img.width() as usize);
            match shape {
                None => shape = Some(dims),
                Some(s) if s != dims => {
                    return Err(HarnessError::Runtime(format!(
                        "{} is {}x{}, expected {}x{}",
                        file.display(),
                        dims.0,
                        dims.1,
                        s.0,
                        s.1
                    )))
                }
                Some(_) => {}
            }
            pixels.extend(img.as_raw().iter().map(|&v| f64::from(v) / 127.5 - 1.0));
            labels.push(label);
            count += 1;
        }
        classes.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        counts.push(count);
    }
    let (height, width) = shape
        .ok_or_else(|| HarnessError::Usage(format!("no images found under {}", input.display())))?;
    let images = Tensor::new(vec![labels.len(), height, width, 1], pixels)
        .map_err(lfm_core::CoreError::from)?;
    let set = LabeledImageSet::new(images, labels, classes.len())?;
    save_binary(&set, output)?;
    Ok(ConvertReport {
        classes,
        counts,
        height,
        width,
    })
}
