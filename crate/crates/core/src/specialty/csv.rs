//! Plain-text exchange formats for the `partition` command.
//!
//! Matrices: a `C=<rows>,K=<cols>` header, then one comma-separated row per
//! class. Mappings: the same header, then `class,specialty` rows.

use super::{ConfusionMatrix, LabelMapping, SpecialtyError};

fn csv_err(line: usize, reason: impl Into<String>) -> SpecialtyError {
    SpecialtyError::Csv {
        line,
        reason: reason.into(),
    }
}

/// Content lines with their 1-based line numbers; blank lines are skipped.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn header(line: usize, text: &str) -> Result<(usize, usize), SpecialtyError> {
    let mut c = None;
    let mut k = None;
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| csv_err(line, "header must be C=<n>,K=<n>"))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| csv_err(line, format!("bad header value '{value}'")))?;
        match key.trim() {
            "C" => c = Some(value),
            "K" => k = Some(value),
            other => return Err(csv_err(line, format!("unknown header key '{other}'"))),
        }
    }
    match (c, k) {
        (Some(c), Some(k)) if c > 0 && k > 0 => Ok((c, k)),
        _ => Err(csv_err(line, "header must give positive C and K")),
    }
}

pub fn read_confusion_csv(text: &str) -> Result<ConfusionMatrix, SpecialtyError> {
    let mut it = lines(text);
    let (hl, h) = it.next().ok_or_else(|| csv_err(1, "empty file"))?;
    let (c, k) = header(hl, h)?;
    let mut rows = Vec::with_capacity(c);
    let mut last = hl;
    for (ln, line) in it {
        last = ln;
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| csv_err(ln, format!("bad number '{}'", v.trim())))
            })
            .collect::<Result<_, _>>()?;
        if row.len() != k {
            return Err(csv_err(ln, format!("expected {k} values, found {}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(csv_err(ln, format!("entry {v} is not a non-negative number")));
        }
        rows.push(row);
    }
    if rows.len() != c {
        return Err(csv_err(last, format!("expected {c} rows, found {}", rows.len())));
    }
    ConfusionMatrix::from_rows(&rows)
}

pub fn read_mapping_csv(text: &str) -> Result<LabelMapping, SpecialtyError> {
    let mut it = lines(text);
    let (hl, h) = it.next().ok_or_else(|| csv_err(1, "empty file"))?;
    let (c, k) = header(hl, h)?;
    let mut assignments = vec![None; c];
    for (ln, line) in it {
        let (class, spec) = line
            .split_once(',')
            .ok_or_else(|| csv_err(ln, "expected class,specialty"))?;
        let class: usize = class.trim().parse().map_err(|_| csv_err(ln, "bad class"))?;
        let spec: usize = spec.trim().parse().map_err(|_| csv_err(ln, "bad specialty"))?;
        if class >= c || spec >= k {
            return Err(csv_err(ln, format!("entry {class},{spec} outside C={c},K={k}")));
        }
        if assignments[class].replace(spec).is_some() {
            return Err(csv_err(ln, format!("class {class} listed twice")));
        }
    }
    let assignments: Option<Vec<usize>> = assignments.into_iter().collect();
    let assignments = assignments.ok_or_else(|| csv_err(hl, "some classes are unassigned"))?;
    LabelMapping::new(assignments, k)
}

/// `rank,specialty,size` rows, largest specialty first (ties by index).
pub fn size_histogram_csv(mapping: &LabelMapping) -> String {
    let sizes = mapping.sizes();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(sizes[j]), j));
    let mut s = String::from("rank,specialty,size\n");
    for (rank, j) in order.into_iter().enumerate() {
        s.push_str(&format!("{rank},{j},{}\n", sizes[j]));
    }
    s
}
