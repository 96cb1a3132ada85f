//! Binary container shared by checkpoints (`NOFE`) and datasets (`NOFD`).
//!
//! Layout: 4 magic bytes, a little-endian `u16` version, then records until
//! end of file. Each record is a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` `u32` dims, and the values as little-endian `f32`.

use std::io::Write;
use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::specialty::LabelMapping;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NOFE";
pub const DATASET_MAGIC: &[u8; 4] = b"NOFD";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_records(magic: &[u8; 4], records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], DataError> {
        if self.bytes.len() - self.at < n {
            return Err(DataError::Format {
                offset: self.at as u64,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a whole container; nothing is returned unless every record is intact.
pub fn read_records(bytes: &[u8], magic: &[u8; 4]) -> Result<Vec<Record>, DataError> {
    if bytes.len() < 6 || &bytes[..4] != magic {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut r = Reader { bytes, at: 6 };
    let mut records = Vec::new();
    while r.at < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.at;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| DataError::Format {
                offset: name_at as u64,
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record {
            name,
            shape,
            values,
        });
    }
    Ok(records)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(path, e))
}

/// Writes named parameter tensors in the given order.
pub fn save_checkpoint(path: &Path, params: &[Record]) -> Result<(), DataError> {
    write_file(path, &write_records(CHECKPOINT_MAGIC, params))
}

/// Reads a checkpoint and checks it against the expected `(name, shape)`
/// list, returning values in that order.
pub fn load_checkpoint(
    path: &Path,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<Vec<f32>>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let records = read_records(&bytes, CHECKPOINT_MAGIC)?;
    match_records(records, expected)
}

/// Checks records against the expected `(name, shape)` list, in order, and
/// returns their values.
pub fn match_records(
    records: Vec<Record>,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<Vec<f32>>, DataError> {
    let mut out = Vec::with_capacity(expected.len());
    let mut it = records.into_iter();
    for (name, shape) in expected {
        let rec = it.next().ok_or_else(|| DataError::MissingRecord(name.clone()))?;
        if &rec.name != name {
            return Err(DataError::MissingRecord(format!("{name} (found {})", rec.name)));
        }
        if &rec.shape != shape {
            return Err(DataError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: rec.shape,
            });
        }
        out.push(rec.values);
    }
    if let Some(extra) = it.next() {
        return Err(DataError::UnexpectedRecord(extra.name));
    }
    Ok(out)
}

fn ints(values: &[usize]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn to_ints(values: &[f32], what: &str) -> Result<Vec<usize>, DataError> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(DataError::Invalid(format!("{what} value {v} is not an index")))
            }
        })
        .collect()
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let [c, h, w] = ds.image_shape;
    let split = match ds.split {
        Split::Train => 0.0,
        Split::Test => 1.0,
    };
    let mut records = vec![
        Record {
            name: "meta".into(),
            shape: vec![2],
            values: vec![ds.classes as f32, split],
        },
        Record {
            name: "images".into(),
            shape: vec![ds.len(), c, h, w],
            values: ds.images.clone(),
        },
        Record {
            name: "labels".into(),
            shape: vec![ds.len()],
            values: ints(&ds.labels),
        },
    ];
    if let Some(m) = &ds.mean_image {
        records.push(Record {
            name: "mean".into(),
            shape: vec![c, h, w],
            values: m.clone(),
        });
    }
    if let Some(p) = &ds.planted_mapping {
        records.push(Record {
            name: "planted".into(),
            shape: vec![p.classes()],
            values: ints(p.as_slice()),
        });
        records.push(Record {
            name: "planted_k".into(),
            shape: vec![1],
            values: vec![p.specialties() as f32],
        });
    }
    write_file(path, &write_records(DATASET_MAGIC, &records))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let records = read_records(&bytes, DATASET_MAGIC)?;
    let find = |name: &str| records.iter().find(|r| r.name == name);
    let need = |name: &str| find(name).ok_or_else(|| DataError::MissingRecord(name.into()));
    let meta = need("meta")?;
    let images = need("images")?;
    let labels = need("labels")?;
    if meta.values.len() != 2 || images.shape.len() != 4 {
        return Err(DataError::Invalid("malformed dataset header".into()));
    }
    let classes = to_ints(&meta.values[..1], "class count")?[0];
    let split = if meta.values[1] == 0.0 {
        Split::Train
    } else {
        Split::Test
    };
    let shape = [images.shape[1], images.shape[2], images.shape[3]];
    let mut ds = Dataset::new(
        shape,
        images.values.clone(),
        to_ints(&labels.values, "label")?,
        classes,
        split,
    )?;
    ds.mean_image = find("mean").map(|r| r.values.clone());
    if let (Some(p), Some(k)) = (find("planted"), find("planted_k")) {
        let k = to_ints(&k.values, "planted K")?.first().copied().unwrap_or(0);
        let mapping = LabelMapping::new(to_ints(&p.values, "planted")?, k)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        ds.planted_mapping = Some(mapping);
    }
    Ok(ds)
}
