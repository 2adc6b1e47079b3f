//! Synthetic stereo data, augmentation, and file formats.

pub mod augment;
pub mod pfm;
pub mod pnm;
pub mod synth;
pub mod weights;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use synth::{generate_stereogram, StereoPair, SynthConfig};

/// File names of sample `index` inside a dataset directory.
pub fn sample_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("left_{index:05}.ppm")),
        dir.join(format!("right_{index:05}.ppm")),
        dir.join(format!("gt_{index:05}.pfm")),
    ]
}

pub fn write_sample(dir: &Path, index: usize, pair: &StereoPair) -> Result<()> {
    let [l, r, g] = sample_paths(dir, index);
    pnm::write_ppm(l, &pair.left)?;
    pnm::write_ppm(r, &pair.right)?;
    pfm::write_pfm(g, &pair.gt)
}

pub fn read_sample(dir: &Path, index: usize) -> Result<StereoPair> {
    let [l, r, g] = sample_paths(dir, index);
    let pair = StereoPair { left: pnm::read_image(l)?, right: pnm::read_image(r)?, gt: pfm::read_pfm(g)? };
    if pair.left.shape() != pair.right.shape() || pair.gt.height != pair.height() || pair.gt.width != pair.width() {
        return Err(Error::Format(format!("sample {index}: image and disparity sizes disagree")));
    }
    Ok(pair)
}

/// Indices of all `left_NNNNN.ppm` files in `dir`, ascending.
pub fn sample_indices(dir: &Path) -> Result<Vec<usize>> {
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name.strip_prefix("left_").and_then(|s| s.strip_suffix(".ppm")) {
            if let Ok(i) = idx.parse() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    Ok(indices)
}

/// Every sample of a dataset directory, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<StereoPair>> {
    let indices = sample_indices(dir)?;
    if indices.is_empty() {
        return Err(Error::Format(format!("no samples in {}", dir.display())));
    }
    indices.into_iter().map(|i| read_sample(dir, i)).collect()
}
