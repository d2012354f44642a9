//! Labeled datasets: IDX image/label files and a synthetic generator.
//!
//! IDX is the classic big-endian format: images carry magic `0x00000803`
//! followed by count, rows, and cols; labels carry magic `0x00000801`
//! followed by count. Pixels are bytes and get scaled to `[0, 1]`.
//!
//! The synthetic generator draws one prototype vector per class and
//! perturbs it with Gaussian noise, clamping back into the unit cube. It
//! exists so training and certification can run end to end on machines
//! without the real image files; the noise level tunes how hard the task
//! is.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
/// IDX label files carry digits, so anything above 9 is corrupt.
const MAX_IDX_LABEL: u8 = 9;

/// Feature rows in `[0, 1]` with one class label per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.nrows(),
                labels: labels.len(),
            });
        }
        Ok(Dataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension per example.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Largest label present; `None` when empty.
    pub fn max_label(&self) -> Option<u8> {
        self.labels.iter().copied().max()
    }
}

fn be_u32(bytes: &[u8], pos: usize, file: &str, what: &'static str) -> Result<u32> {
    let end = pos + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            file: file.to_string(),
            offset: bytes.len(),
            expected: end - bytes.len(),
            what,
        });
    }
    Ok(u32::from_be_bytes(bytes[pos..end].try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, file: &str) -> Result<()> {
    let found = be_u32(bytes, 0, file, "magic")?;
    if found != expected {
        return Err(Error::BadMagic {
            file: file.to_string(),
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

fn parse_idx_images(bytes: &[u8], file: &str) -> Result<Array2<f64>> {
    check_magic(bytes, IMAGE_MAGIC, file)?;
    let count = be_u32(bytes, 4, file, "image count")? as usize;
    let rows = be_u32(bytes, 8, file, "row count")? as usize;
    let cols = be_u32(bytes, 12, file, "column count")? as usize;
    let pixels = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::invalid(format!("{file}: image dimensions overflow")))?;
    let need = 16 + pixels;
    if bytes.len() < need {
        return Err(Error::Truncated {
            file: file.to_string(),
            offset: bytes.len(),
            expected: need - bytes.len(),
            what: "image payload",
        });
    }
    if bytes.len() > need {
        return Err(Error::invalid(format!(
            "{file}: {} trailing bytes after image payload",
            bytes.len() - need
        )));
    }
    let data: Vec<f64> = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Array2::from_shape_vec((count, rows * cols), data)
        .map_err(|e| Error::invalid(format!("{file}: {e}")))
}

fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC, file)?;
    let count = be_u32(bytes, 4, file, "label count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Truncated {
            file: file.to_string(),
            offset: bytes.len(),
            expected: need - bytes.len(),
            what: "label payload",
        });
    }
    if bytes.len() > need {
        return Err(Error::invalid(format!(
            "{file}: {} trailing bytes after label payload",
            bytes.len() - need
        )));
    }
    let labels = bytes[8..need].to_vec();
    for (index, &value) in labels.iter().enumerate() {
        if value > MAX_IDX_LABEL {
            return Err(Error::BadLabel {
                index,
                value,
                max: MAX_IDX_LABEL,
            });
        }
    }
    Ok(labels)
}

/// Loads an IDX image file and its matching label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_name = images.display().to_string();
    let label_name = labels.display().to_string();
    let features = parse_idx_images(&fs::read(images)?, &image_name)?;
    let labels = parse_idx_labels(&fs::read(labels)?, &label_name)?;
    Dataset::new(features, labels)
}

/// Class-prototype blobs: one uniform prototype per class, examples are
/// the prototype plus Gaussian noise clamped to `[0, 1]`. Labels cycle
/// `0, 1, ..., classes-1, 0, ...` so every class is (near) balanced. The
/// same seed always produces the same dataset.
pub fn synthetic_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(Error::invalid("synthetic dataset needs n >= 1 and dim >= 1"));
    }
    if classes < 2 || classes > 256 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs 2..=256 classes, got {classes}"
        )));
    }
    if !noise_sd.is_finite() || noise_sd < 0.0 {
        return Err(Error::invalid(format!("noise sd {noise_sd} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes =
        Array2::from_shape_simple_fn((classes, dim), || rng.random_range(0.0..1.0));
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        let proto = prototypes.row(class);
        let mut row = features.row_mut(i);
        for (x, &p) in row.iter_mut().zip(proto) {
            let z: f64 = rng.sample(StandardNormal);
            *x = (p + noise_sd * z).clamp(0.0, 1.0);
        }
    }
    Dataset::new(features, labels)
}
