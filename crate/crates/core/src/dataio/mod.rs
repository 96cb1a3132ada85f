//! Datasets, preprocessing and on-disk formats.

mod cifar;
mod container;
mod preprocess;
mod synth;

use thiserror::Error;

use crate::specialty::LabelMapping;
use crate::tensor::Tensor;

pub use cifar::{load_cifar100, restrict_classes, CIFAR_RECORD_BYTES};
pub use container::{
    load_checkpoint, load_dataset, match_records, read_records, save_checkpoint, save_dataset, write_records,
    Record, CHECKPOINT_MAGIC, DATASET_MAGIC, FORMAT_VERSION,
};
pub use preprocess::{center_crop, mirror, pad_crop, per_pixel_mean, Preprocessor};
pub use synth::{planted_prototypes, synth_hierarchy, SynthParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing record '{0}'")]
    MissingRecord(String),
    #[error("unexpected record '{0}'")]
    UnexpectedRecord(String),
    #[error("invalid data: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled images stored contiguously, each `image_shape` in channel-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Per-pixel mean already subtracted from `images`, if any.
    pub mean_image: Option<Vec<f32>>,
    /// Ground-truth superclass of every class (synthetic data only).
    pub planted_mapping: Option<LabelMapping>,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        images: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let len: usize = image_shape.iter().product();
        if len == 0 || images.len() != labels.len() * len {
            return Err(DataError::Invalid(format!(
                "{} values for {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {y} outside 0..{classes}")));
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            classes,
            split,
            mean_image: None,
            planted_mapping: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// Raw images `indices` as an `N x C x H x W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let [c, h, w] = self.image_shape;
        let mut values = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            values.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), c, h, w], values).expect("consistent batch shape")
    }
}
