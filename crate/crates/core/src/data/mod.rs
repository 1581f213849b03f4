//! Dataset ingestion, synthetic data, checkpoints and image output.

mod checkpoint;
mod idx;
mod pgm;
mod synthetic;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use checkpoint::{
    load_autoencoder, load_checkpoint, load_snn, save_autoencoder, save_checkpoint, save_snn,
    Checkpoint, Role, CHECKPOINT_VERSION,
};
pub use idx::{
    parse_idx, parse_idx_images, parse_idx_labels, pixels_to_tensors, Idx, IMAGES_MAGIC,
    LABELS_MAGIC,
};
pub use pgm::{read_pgm, to_gray_bytes, write_mask_images, write_pgm, MaskImages};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Flat input vectors in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// `(height, width)` when the inputs are single-channel images.
    pub spatial: Option<(usize, usize)>,
    /// Input indices that carry the class signal, for synthetic data.
    pub ground_truth: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let m = self.input_len();
        for (i, x) in self.inputs.iter().enumerate() {
            if x.len() != m {
                return Err(Error::Shape(format!(
                    "input {i} has {} values, expected {m}",
                    x.len()
                )));
            }
            if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "input {i} has values outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// First `n_train` examples versus the rest.
    pub fn split(&self, n_train: usize) -> (Dataset, Dataset) {
        let n_train = n_train.min(self.len());
        let part = |range: std::ops::Range<usize>| Dataset {
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            spatial: self.spatial,
            ground_truth: self.ground_truth.clone(),
        };
        (part(0..n_train), part(n_train..self.len()))
    }

    pub fn truncate(&mut self, n: usize) {
        self.inputs.truncate(n);
        self.labels.truncate(n);
    }
}

/// Reads an IDX image file and its label file into a [`Dataset`].
pub fn load_idx_dataset(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let image_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let label_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    let mut data = Dataset {
        inputs: pixels_to_tensors(rows, cols, &pixels),
        labels: labels.into_iter().map(usize::from).collect(),
        spatial: Some((rows, cols)),
        ground_truth: None,
    };
    if data.inputs.len() != data.labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            data.inputs.len(),
            data.labels.len()
        )));
    }
    if let Some(n) = limit {
        data.truncate(n);
    }
    Ok(data)
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
