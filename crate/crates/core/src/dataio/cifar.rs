use std::path::Path;

use super::{DataError, Dataset, Split};

/// Coarse label byte, fine label byte, then 32x32 R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 2 + 3 * 32 * 32;
const CLASSES: usize = 100;

/// Reads a CIFAR-100 binary file (`train.bin` or `test.bin`). Fine labels are
/// used and pixels are scaled to `[0, 1]`.
pub fn load_cifar100(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_cifar100(&bytes, split)
}

pub(crate) fn parse_cifar100(bytes: &[u8], split: Split) -> Result<Dataset, DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(DataError::Format {
            offset: whole as u64,
            reason: format!(
                "{} trailing bytes; file size {} is not a multiple of {CIFAR_RECORD_BYTES}",
                bytes.len() - whole,
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * 3072);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CLASSES {
            return Err(DataError::Format {
                offset: (r * CIFAR_RECORD_BYTES + 1) as u64,
                reason: format!("fine label {fine} out of range"),
            });
        }
        labels.push(fine);
        images.extend(rec[2..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new([3, 32, 32], images, labels, CLASSES, split)
}

/// Keeps only classes `0..classes`.
pub fn restrict_classes(ds: &Dataset, classes: usize) -> Dataset {
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] < classes).collect();
    let mut out = ds.subset(&keep);
    out.classes = classes;
    out.planted_mapping = None;
    out
}
