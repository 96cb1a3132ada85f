//! Class-to-specialty mappings and the algorithms that produce them.
//!
//! Indices are 0-based throughout: classes are `0..C`, specialties `0..K`.

mod assign;
mod confusion;
mod csv;
mod elasso;
mod spectral;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use assign::{fully_balanced_assign, fully_balanced_with_order, greedy_assign, random_balanced};
pub use confusion::{build_confusion, ConfusionMatrix};
pub use csv::{read_confusion_csv, read_mapping_csv, size_histogram_csv};
pub use elasso::{
    brute_force_elasso, elasso_assign, elasso_objective, exclusive_lasso_norm, ElassoResult,
    BRUTE_FORCE_LIMIT, DEFAULT_LAMBDA, DEFAULT_MAX_SWEEPS,
};
pub use spectral::spectral_assign;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialtyError {
    #[error("{what} index {index} out of range 0..{bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("{k} specialties do not divide {c} classes")]
    NotDivisible { c: usize, k: usize },
    #[error("invalid number of specialties {k} for {c} classes")]
    InvalidK { c: usize, k: usize },
    #[error("matrix shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("invalid matrix entry at row {row}, column {col}: {value}")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("instance too large for exhaustive search: {k}^{c} assignments")]
    TooLarge { c: usize, k: usize },
    #[error("row {row} of the indicator matrix does not have exactly one 1")]
    NotIndicator { row: usize },
    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// The map from classes to specialties, `assignments[class] = specialty`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMapping {
    assignments: Vec<usize>,
    k: usize,
}

impl LabelMapping {
    pub fn new(assignments: Vec<usize>, k: usize) -> Result<Self, SpecialtyError> {
        if k == 0 {
            return Err(SpecialtyError::InvalidK {
                c: assignments.len(),
                k,
            });
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(SpecialtyError::IndexOutOfRange {
                what: "specialty",
                index: bad,
                bound: k,
            });
        }
        Ok(Self { assignments, k })
    }

    pub fn identity(c: usize) -> Self {
        Self {
            assignments: (0..c).collect(),
            k: c,
        }
    }

    pub fn classes(&self) -> usize {
        self.assignments.len()
    }

    pub fn specialties(&self) -> usize {
        self.k
    }

    pub fn specialty_of(&self, class: usize) -> usize {
        self.assignments[class]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.assignments
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    /// Classes in specialty `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        (0..self.classes())
            .filter(|&i| self.assignments[i] == j)
            .collect()
    }

    pub fn to_indicator(&self) -> IndicatorMatrix {
        IndicatorMatrix {
            columns: self.assignments.clone(),
            k: self.k,
        }
    }

    /// Specialties renumbered by first appearance; equal for mappings that
    /// induce the same partition.
    pub fn canonical(&self) -> Vec<usize> {
        let mut relabel = vec![usize::MAX; self.k];
        let mut next = 0;
        self.assignments
            .iter()
            .map(|&a| {
                if relabel[a] == usize::MAX {
                    relabel[a] = next;
                    next += 1;
                }
                relabel[a]
            })
            .collect()
    }

    /// True when both mappings partition the classes identically.
    pub fn same_partition(&self, other: &Self) -> bool {
        self.classes() == other.classes() && self.canonical() == other.canonical()
    }

    /// Drops empty specialties, renumbering the rest in order.
    pub fn compact(&self) -> Self {
        let sizes = self.sizes();
        let mut new_index = vec![0; self.k];
        let mut next = 0;
        for j in 0..self.k {
            if sizes[j] > 0 {
                new_index[j] = next;
                next += 1;
            }
        }
        Self {
            assignments: self.assignments.iter().map(|&a| new_index[a]).collect(),
            k: next.max(1),
        }
    }

    /// Mapping with specialty `j` renamed to `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, SpecialtyError> {
        Self::new(self.assignments.iter().map(|&a| perm[a]).collect(), self.k)
    }

    /// CSV form: a `C=..,K=..` header then `class,specialty` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("C={},K={}\n", self.classes(), self.k);
        for (i, a) in self.assignments.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }

    /// Short content hash of the CSV form.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_csv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Binary C x K matrix with exactly one 1 per row, stored as the column of each row's 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndicatorMatrix {
    columns: Vec<usize>,
    k: usize,
}

impl IndicatorMatrix {
    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self, SpecialtyError> {
        let k = rows.first().map_or(0, Vec::len);
        let mut columns = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(SpecialtyError::ShapeMismatch {
                    expected: format!("{k} columns"),
                    found: format!("{} in row {i}", row.len()),
                });
            }
            let ones: Vec<usize> = (0..k).filter(|&j| row[j] == 1).collect();
            if ones.len() != 1 || row.iter().any(|&v| v > 1) {
                return Err(SpecialtyError::NotIndicator { row: i });
            }
            columns.push(ones[0]);
        }
        Ok(Self { columns, k })
    }

    pub fn rows(&self) -> usize {
        self.columns.len()
    }

    pub fn cols(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        u8::from(self.columns[i] == j)
    }

    pub fn column_of(&self, i: usize) -> usize {
        self.columns[i]
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in &self.columns {
            s[c] += 1;
        }
        s
    }

    pub fn to_mapping(&self) -> LabelMapping {
        LabelMapping {
            assignments: self.columns.clone(),
            k: self.k,
        }
    }
}
