//! Datasets: the synthetic two-circles generator, IDX (MNIST-style) digit
//! ingestion, CSV loading, standardization, and balanced subsetting.
//!
//! Labels, when present, exist purely for evaluation and test fixtures; no
//! loss ever reads them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;

/// An instance matrix with optional evaluation-only labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Dataset> {
        if let Some(labels) = &labels {
            if labels.len() != x.rows() {
                return Err(Error::contract(format!(
                    "{} labels for {} instances",
                    labels.len(),
                    x.rows()
                )));
            }
        }
        Ok(Dataset {
            x,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Number of distinct labels, when labels are present (max label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// A copy restricted to the given row indices.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Tensor::raw(indices.len(), d, data),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
        }
    }
}

/// Two concentric circles with additive isotropic Gaussian noise. Inner
/// points get label 0, outer points label 1. Angles are uniform; per point
/// the generator draws one angle and two noise normals, in that order, so
/// output is deterministic in the seed for any `noise_sigma` (including 0,
/// where every point lies exactly on its circle).
pub fn gen_two_circles(
    n_per_class: usize,
    r_inner: f64,
    r_outer: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0 < r_inner && r_inner < r_outer) {
        return Err(Error::contract(format!(
            "need 0 < r_inner < r_outer, got {r_inner} and {r_outer}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::contract("noise_sigma must be nonnegative"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_per_class * 4);
    let mut labels = Vec::with_capacity(n_per_class * 2);
    for (label, radius) in [(0usize, r_inner), (1, r_outer)] {
        for _ in 0..n_per_class {
            let angle: f64 = rng.random_range(0.0..TAU);
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            data.push(radius * angle.cos() + noise_sigma * n1);
            data.push(radius * angle.sin() + noise_sigma * n2);
            labels.push(label);
        }
    }
    Dataset::new(
        Tensor::from_vec(n_per_class * 2, 2, data)?,
        Some(labels),
        "two-circles",
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (big-endian magic numbers
/// `0x00000803` / `0x00000801`). Pixels arrive as raw byte values in
/// `[0, 255]`; apply [`standardize`] afterwards if needed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let img_err = |offset: usize, detail: String| Error::IdxFormat {
        path: images_path.display().to_string(),
        offset,
        detail,
    };
    let magic = read_be_u32(&images, 0)
        .ok_or_else(|| img_err(0, "truncated before magic number".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(img_err(
            0,
            format!("magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_be_u32(&images, 4)
        .ok_or_else(|| img_err(4, "truncated before image count".into()))? as usize;
    let rows = read_be_u32(&images, 8)
        .ok_or_else(|| img_err(8, "truncated before row count".into()))? as usize;
    let cols = read_be_u32(&images, 12)
        .ok_or_else(|| img_err(12, "truncated before column count".into()))? as usize;
    let pixel_count = n * rows * cols;
    if images.len() != 16 + pixel_count {
        return Err(img_err(
            images.len().min(16 + pixel_count),
            format!(
                "payload of {} bytes for {n} images of {rows}x{cols}",
                images.len() - 16.min(images.len())
            ),
        ));
    }

    let lbl_err = |offset: usize, detail: String| Error::IdxFormat {
        path: labels_path.display().to_string(),
        offset,
        detail,
    };
    let magic = read_be_u32(&labels, 0)
        .ok_or_else(|| lbl_err(0, "truncated before magic number".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(lbl_err(
            0,
            format!("magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = read_be_u32(&labels, 4)
        .ok_or_else(|| lbl_err(4, "truncated before label count".into()))? as usize;
    if labels.len() != 8 + n_labels {
        return Err(lbl_err(
            labels.len().min(8 + n_labels),
            format!("payload of {} bytes for {n_labels} labels", labels.len() - 8.min(labels.len())),
        ));
    }
    if n_labels != n {
        return Err(lbl_err(
            4,
            format!("{n_labels} labels for {n} images"),
        ));
    }

    let data: Vec<f64> = images[16..].iter().map(|&b| b as f64).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(
        Tensor::from_vec(n, rows * cols, data)?,
        Some(labels),
        images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
    )
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    let chunk: [u8; 4] = bytes.get(offset..offset + 4)?.try_into().ok()?;
    Some(u32::from_be_bytes(chunk))
}

/// Writes an image/label pair in IDX format. Pixel values must already be
/// integers in [0, 255]; used by tests and by dataset preparation tooling.
pub fn write_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::contract(format!(
            "{rows}x{cols} image shape for {}-dimensional instances",
            ds.dim()
        )));
    }
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("IDX export needs labels"))?;
    let mut images = Vec::with_capacity(16 + ds.len() * ds.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.x.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::contract(format!(
                "pixel value {v} is not an integer in [0, 255]"
            )));
        }
        images.push(v as u8);
    }
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > u8::MAX as usize {
            return Err(Error::contract(format!("label {l} exceeds one byte")));
        }
        lbl.push(l as u8);
    }
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

/// A fitted global affine map `x -> (x - mean) / std`, pooled over every
/// value of the fitted split (one scalar pair, not per-feature).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Fits on all values of `ds` using the population (biased) variance.
    pub fn fit(ds: &Dataset) -> Result<Standardizer> {
        let values = ds.x.data();
        if values.is_empty() {
            return Err(Error::contract("cannot standardize an empty dataset"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::contract(
                "zero variance: dataset values are all identical",
            ));
        }
        Ok(Standardizer {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: ds.x.map(|v| (v - self.mean) / self.std),
            labels: ds.labels.clone(),
            name: ds.name.clone(),
        }
    }
}

/// Fits a standardizer on `ds` and returns the transformed dataset with the
/// fitted map, reusable on held-out splits.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardizer)> {
    let st = Standardizer::fit(ds)?;
    Ok((st.apply(ds), st))
}

/// A balanced random subsample: `per_class` instances of each requested
/// class, labels remapped to `0..classes.len()` in the order given.
/// Deterministic in the seed.
pub fn subset(ds: &Dataset, classes: &[usize], per_class: usize, seed: u64) -> Result<Dataset> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("subset needs labels"))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::with_capacity(classes.len() * per_class);
    let mut new_labels: Vec<usize> = Vec::with_capacity(classes.len() * per_class);
    for (new_label, &class) in classes.iter().enumerate() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::contract(format!(
                "class {class} has {} instances, need {per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        members.truncate(per_class);
        members.sort_unstable();
        keep.extend_from_slice(&members);
        new_labels.extend(std::iter::repeat(new_label).take(per_class));
    }
    let mut out = ds.select(&keep);
    out.labels = Some(new_labels);
    out.name = format!("{}-subset", ds.name);
    Ok(out)
}

/// Loads a CSV with a header row. Every column is a feature except the
/// optional named label column, whose values must be nonnegative integers.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("no column named {name:?}")))?,
        ),
        None => None,
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0usize;
    let mut dim = None;
    for record in reader.records() {
        let record = record?;
        let mut row_dim = 0usize;
        for (i, field) in record.iter().enumerate() {
            if Some(i) == label_idx {
                let l: usize = field.trim().parse().map_err(|_| {
                    Error::Config(format!("label {field:?} is not a nonnegative integer"))
                })?;
                labels.push(l);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Config(format!("value {field:?} is not a number"))
                })?;
                data.push(v);
                row_dim += 1;
            }
        }
        match dim {
            None => dim = Some(row_dim),
            Some(d) if d != row_dim => {
                return Err(Error::Config(format!(
                    "row {} has {row_dim} features, expected {d}",
                    n + 1
                )))
            }
            _ => {}
        }
        n += 1;
    }
    let dim = dim.unwrap_or(0);
    Dataset::new(
        Tensor::from_vec(n, dim, data)?,
        label_idx.map(|_| labels),
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    )
}
