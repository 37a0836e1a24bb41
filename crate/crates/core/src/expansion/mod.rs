//! Dataset expansion and the downstream evaluation harness.
//!
//! A trained generator expands a labeled dataset k-fold per label
//! combination, which preserves the joint (and hence per-label) label
//! distribution exactly. A small convolutional classifier and a kernel-MMD
//! fidelity score measure what the synthetic data buys.

pub mod classifier;
pub mod metrics;
pub mod mmd;
pub mod toy;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diffusion::NoiseSchedule;
use crate::error::{GecaError, Result};
use crate::image;
use crate::rule::{LabelCond, ThetaParams};
use crate::sampler::{sample, SamplerConfig};
use crate::tensor::Tensor;

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetItem {
    pub path: PathBuf,
    pub labels: Vec<bool>,
    pub synthetic: bool,
}

/// Images plus multi-label bit vectors, backed by a CSV manifest
/// (`path,labels[,synthetic]`, labels as a bit string like `10100`).
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<DatasetItem>,
    pub label_names: Vec<String>,
    pub manifest_path: PathBuf,
}

fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl LabeledDataset {
    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Read a manifest; image paths resolve relative to its directory.
    pub fn load(manifest_path: &Path) -> Result<LabeledDataset> {
        let text = fs::read_to_string(manifest_path).map_err(|e| {
            GecaError::Input(format!(
                "cannot read manifest {}: {}",
                manifest_path.display(),
                e
            ))
        })?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| GecaError::Corrupt("empty manifest".into()))?;
        let has_synth_col = match header.trim() {
            "path,labels" => false,
            "path,labels,synthetic" => true,
            other => {
                return Err(GecaError::Corrupt(format!(
                    "unexpected manifest header {:?}",
                    other
                )))
            }
        };
        let mut items = Vec::new();
        let mut width = None;
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let expected = if has_synth_col { 3 } else { 2 };
            if fields.len() != expected {
                return Err(GecaError::Corrupt(format!(
                    "manifest line {}: expected {} fields, got {}",
                    lineno + 2,
                    expected,
                    fields.len()
                )));
            }
            let labels = match LabelCond::parse_bits(fields[1].trim())? {
                LabelCond::Bits(bits) => bits,
                LabelCond::Null => unreachable!(),
            };
            match width {
                None => width = Some(labels.len()),
                Some(w) if w != labels.len() => {
                    return Err(GecaError::Corrupt(format!(
                        "manifest line {}: label width {} differs from {}",
                        lineno + 2,
                        labels.len(),
                        w
                    )))
                }
                _ => {}
            }
            let synthetic = has_synth_col && fields[2].trim() == "1";
            items.push(DatasetItem {
                path: root.join(fields[0].trim()),
                labels,
                synthetic,
            });
        }
        let width = width.unwrap_or(0);
        Ok(LabeledDataset {
            items,
            label_names: (0..width).map(|i| format!("label{}", i)).collect(),
            manifest_path: manifest_path.to_path_buf(),
        })
    }

    /// Write the manifest; paths are stored relative to its directory when
    /// possible. The synthetic column appears only when some item needs it.
    pub fn save_manifest(&self, manifest_path: &Path) -> Result<()> {
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let any_synth = self.items.iter().any(|i| i.synthetic);
        let mut out = String::new();
        out.push_str(if any_synth {
            "path,labels,synthetic\n"
        } else {
            "path,labels\n"
        });
        for item in &self.items {
            let rel = item
                .path
                .strip_prefix(root)
                .unwrap_or(&item.path)
                .to_string_lossy()
                .into_owned();
            out.push_str(&rel);
            out.push(',');
            out.push_str(&bits_to_string(&item.labels));
            if any_synth {
                out.push_str(if item.synthetic { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        fs::write(manifest_path, out)?;
        Ok(())
    }

    /// Count of items carrying each label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_labels()];
        for item in &self.items {
            for (c, &b) in counts.iter_mut().zip(&item.labels) {
                if b {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// Count per exact label combination, deterministically ordered.
    pub fn combination_counts(&self) -> BTreeMap<Vec<bool>, usize> {
        let mut map = BTreeMap::new();
        for item in &self.items {
            *map.entry(item.labels.clone()).or_insert(0) += 1;
        }
        map
    }

    pub fn load_image(&self, index: usize) -> Result<Tensor> {
        image::read(&self.items[index].path)
    }

    pub fn load_all_images(&self) -> Result<Vec<Tensor>> {
        (0..self.items.len()).map(|i| self.load_image(i)).collect()
    }

    /// Original items followed by another dataset's items (used to train on
    /// original + synthetic).
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.n_labels() != other.n_labels() {
            return Err(GecaError::Dimension(
                "cannot concatenate datasets with different label widths".into(),
            ));
        }
        let mut items = self.items.clone();
        items.extend(other.items.clone());
        Ok(LabeledDataset {
            items,
            label_names: self.label_names.clone(),
            manifest_path: self.manifest_path.clone(),
        })
    }
}

/// Synthetic item counts per label combination, scaled by an exact integer
/// factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionPlan {
    /// (label combination, synthetic count), deterministically ordered.
    pub combos: Vec<(Vec<bool>, usize)>,
    pub factor: usize,
}

impl ExpansionPlan {
    pub fn total(&self) -> usize {
        self.combos.iter().map(|(_, n)| n).sum()
    }

    /// Planned synthetic count per label (the Count_aug contribution).
    pub fn per_label_counts(&self, n_labels: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_labels];
        for (bits, n) in &self.combos {
            for (c, &b) in counts.iter_mut().zip(bits) {
                if b {
                    *c += n;
                }
            }
        }
        counts
    }
}

/// Plan k synthetic items per original item of each label combination, so
/// every per-label count scales by exactly k and the label distribution is
/// preserved as exact rationals.
pub fn plan_expansion(dataset: &LabeledDataset, factor: usize) -> Result<ExpansionPlan> {
    if dataset.is_empty() {
        return Err(GecaError::Input(
            "cannot plan an expansion of an empty dataset".into(),
        ));
    }
    if factor < 1 {
        return Err(GecaError::Input(format!(
            "expansion factor must be a positive integer, got {}",
            factor
        )));
    }
    let combos = dataset
        .combination_counts()
        .into_iter()
        .map(|(bits, count)| (bits, count * factor))
        .collect();
    Ok(ExpansionPlan { combos, factor })
}

/// Outcome bookkeeping for one synthesis run.
#[derive(Debug)]
pub struct SynthesisReport {
    pub dataset: LabeledDataset,
    pub planned: usize,
    pub emitted: usize,
    pub skipped: Vec<(Vec<bool>, String)>,
}

/// Generate every planned item, conditioning the sampler on the item's
/// label combination. Images and a manifest land in `out_dir`; failures are
/// skipped and reported.
pub fn synthesize(
    plan: &ExpansionPlan,
    params: &ThetaParams,
    base_config: &SamplerConfig,
    schedule: &NoiseSchedule,
    out_dir: &Path,
) -> Result<SynthesisReport> {
    fs::create_dir_all(out_dir)?;
    let mut items = Vec::with_capacity(plan.total());
    let mut skipped = Vec::new();
    let mut index = 0usize;
    for (bits, count) in &plan.combos {
        let label = LabelCond::Bits(bits.clone());
        for _ in 0..*count {
            let cfg = SamplerConfig {
                seed: base_config.seed.wrapping_add(index as u64),
                ..base_config.clone()
            };
            index += 1;
            match sample(params, &label, &cfg, schedule) {
                Ok(img) => {
                    let name = format!("synth_{:05}.pgm", index - 1);
                    let path = out_dir.join(&name);
                    image::write(&path, &img)?;
                    items.push(DatasetItem {
                        path,
                        labels: bits.clone(),
                        synthetic: true,
                    });
                }
                Err(e) => skipped.push((bits.clone(), e.to_string())),
            }
        }
    }
    let n_labels = plan.combos.first().map(|(b, _)| b.len()).unwrap_or(0);
    let dataset = LabeledDataset {
        items,
        label_names: (0..n_labels).map(|i| format!("label{}", i)).collect(),
        manifest_path: out_dir.join("manifest.csv"),
    };
    dataset.save_manifest(&dataset.manifest_path.clone())?;
    Ok(SynthesisReport {
        planned: plan.total(),
        emitted: dataset.len(),
        skipped,
        dataset,
    })
}
