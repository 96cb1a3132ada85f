use super::{LabelMapping, SpecialtyError};

/// Row-stochastic confusion matrix with the sample count behind each row.
///
/// Rows backed by no samples are uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    /// Wraps explicit entries (e.g. read from CSV). Entries must be finite and
    /// non-negative; rows are used as given.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SpecialtyError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(SpecialtyError::ShapeMismatch {
                    expected: format!("{cols} columns"),
                    found: format!("{} in row {i}", row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(SpecialtyError::InvalidEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
            entries.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            entries,
            counts: vec![1; rows.len()],
        })
    }

    pub fn identity(n: usize) -> Self {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(&rows).expect("identity is valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Entries scaled by `factor` (counts unchanged).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Rows and columns reordered so that new class `i` is old class `perm[i]`.
    /// Only meaningful for square matrices.
    pub fn permuted_square(&self, perm: &[usize]) -> Self {
        let n = self.rows;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self {
            rows: n,
            cols: n,
            entries,
            counts: perm.iter().map(|&p| self.counts[p]).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("C={},K={}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Row `i` is the empirical distribution of predictions over samples whose
/// true class is `i`.
///
/// Without a mapping, `predictions` index the `cols` columns directly. With
/// one, they are class predictions translated to specialties through it.
pub fn build_confusion(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
    cols: usize,
    mapping: Option<&LabelMapping>,
) -> Result<ConfusionMatrix, SpecialtyError> {
    if predictions.len() != labels.len() {
        return Err(SpecialtyError::LengthMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(m) = mapping {
        if m.classes() != classes || m.specialties() != cols {
            return Err(SpecialtyError::ShapeMismatch {
                expected: format!("mapping over {classes} classes into {cols}"),
                found: format!("{} classes into {}", m.classes(), m.specialties()),
            });
        }
    }
    let mut tallies = vec![0usize; classes * cols];
    let mut counts = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(SpecialtyError::IndexOutOfRange {
                what: "label",
                index: y,
                bound: classes,
            });
        }
        let col = match mapping {
            Some(m) => {
                if p >= classes {
                    return Err(SpecialtyError::IndexOutOfRange {
                        what: "prediction",
                        index: p,
                        bound: classes,
                    });
                }
                m.specialty_of(p)
            }
            None => p,
        };
        if col >= cols {
            return Err(SpecialtyError::IndexOutOfRange {
                what: "prediction",
                index: col,
                bound: cols,
            });
        }
        tallies[y * cols + col] += 1;
        counts[y] += 1;
    }
    let uniform = 1.0 / cols as f64;
    let entries = tallies
        .chunks(cols.max(1))
        .zip(&counts)
        .flat_map(|(row, &n)| {
            row.iter().map(move |&t| {
                if n == 0 {
                    uniform
                } else {
                    t as f64 / n as f64
                }
            })
        })
        .collect();
    Ok(ConfusionMatrix {
        rows: classes,
        cols,
        entries,
        counts,
    })
}
