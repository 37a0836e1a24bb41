//! Procedural multi-label toy dataset.
//!
//! Each of up to five binary attributes controls one visible structure in
//! its own region of a grayscale image, so a classifier can separate them
//! and constructive tests can assert presence/absence:
//!   0 ring (top-left), 1 bar (bottom-left), 2 blob (top-right),
//!   3 gradient (global ramp), 4 checker (bottom-right).
//! Attributes are drawn with a fixed skewed distribution to mimic class
//! imbalance.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GecaError, Result};
use crate::expansion::{DatasetItem, LabeledDataset};
use crate::image;
use crate::tensor::Tensor;

/// Attribute prevalence, most common first.
pub const TOY_SKEW: [f32; 5] = [0.5, 0.3, 0.2, 0.1, 0.05];

pub const TOY_LABEL_NAMES: [&str; 5] = ["ring", "bar", "blob", "gradient", "checker"];

const BACKGROUND: f32 = 0.05;

/// Render one image (intensities in [0,1]) for a given attribute vector.
/// Jitter draws come from `rng` only for attributes that are on.
pub fn render_toy_image<R: Rng>(h: usize, w: usize, bits: &[bool], rng: &mut R) -> Tensor {
    let mut img = vec![BACKGROUND; h * w];
    let fh = h as f32;
    let fw = w as f32;

    if bits.len() > 3 && bits[3] {
        // gradient: global left-to-right ramp
        for i in 0..h {
            for j in 0..w {
                img[i * w + j] += 0.25 * j as f32 / (fw - 1.0);
            }
        }
    }
    if !bits.is_empty() && bits[0] {
        // ring in the top-left quadrant
        let (ci, cj) = (fh / 4.0, fw / 4.0);
        let radius = fh.min(fw) / 6.0 + rng.gen_range(-0.3..0.3);
        let thickness = (fh.min(fw) / 12.0).max(0.8);
        for i in 0..h {
            for j in 0..w {
                let d = ((i as f32 - ci).powi(2) + (j as f32 - cj).powi(2)).sqrt();
                if (d - radius).abs() <= thickness {
                    img[i * w + j] = 0.9;
                }
            }
        }
    }
    if bits.len() > 1 && bits[1] {
        // horizontal bar, bottom-left
        let r0 = (0.72 * fh) as usize;
        let r1 = ((0.86 * fh) as usize).min(h);
        let c1 = (0.45 * fw) as usize;
        let shift = rng.gen_range(0..2usize);
        for i in r0.saturating_sub(shift)..r1.saturating_sub(shift) {
            for j in 1..c1 {
                img[i * w + j] = 0.8;
            }
        }
    }
    if bits.len() > 2 && bits[2] {
        // gaussian blob, top-right
        let ci = fh / 4.0 + rng.gen_range(-1.0..1.0);
        let cj = 3.0 * fw / 4.0 + rng.gen_range(-1.0..1.0);
        let sigma = fh.min(fw) / 9.0;
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f32 - ci).powi(2) + (j as f32 - cj).powi(2);
                img[i * w + j] += 0.8 * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    if bits.len() > 4 && bits[4] {
        // checkerboard patch, bottom-right
        let r0 = (0.6 * fh) as usize;
        let c0 = (0.55 * fw) as usize;
        for i in r0..h {
            for j in c0..w {
                if ((i - r0) / 2 + (j - c0) / 2) % 2 == 0 {
                    img[i * w + j] += 0.45;
                }
            }
        }
    }
    // clamp and map [0,1] -> [-1,1]
    let data = img
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0)
        .collect();
    Tensor::new(vec![h, w, 1], data).unwrap()
}

/// Pixels of the ring annulus (used by constructive tests).
pub fn ring_band(h: usize, w: usize) -> Vec<(usize, usize)> {
    let (ci, cj) = (h as f32 / 4.0, w as f32 / 4.0);
    let radius = (h.min(w)) as f32 / 6.0;
    let thickness = ((h.min(w)) as f32 / 12.0).max(0.8);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let d = ((i as f32 - ci).powi(2) + (j as f32 - cj).powi(2)).sqrt();
            if (d - radius).abs() <= thickness - 0.31 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Generate n images under `dir` with a skewed multi-label distribution and
/// write `manifest.csv`. Deterministic in `seed`.
pub fn make_toy_dataset(
    dir: &Path,
    n: usize,
    h: usize,
    w: usize,
    n_labels: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_labels == 0 || n_labels > 5 {
        return Err(GecaError::Config(format!(
            "toy dataset supports 1..=5 labels, got {}",
            n_labels
        )));
    }
    if h < 8 || w < 8 {
        return Err(GecaError::Config(format!(
            "toy images must be at least 8x8, got {}x{}",
            h, w
        )));
    }
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for index in 0..n {
        let bits: Vec<bool> = (0..n_labels)
            .map(|l| rng.gen::<f32>() < TOY_SKEW[l])
            .collect();
        let img = render_toy_image(h, w, &bits, &mut rng);
        let path = dir.join(format!("toy_{:05}.pgm", index));
        image::write(&path, &img)?;
        items.push(DatasetItem {
            path,
            labels: bits,
            synthetic: false,
        });
    }
    let dataset = LabeledDataset {
        items,
        label_names: TOY_LABEL_NAMES[..n_labels]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        manifest_path: dir.join("manifest.csv"),
    };
    dataset.save_manifest(&dataset.manifest_path.clone())?;
    Ok(dataset)
}
