use rand::seq::SliceRandom;

use super::{ConfusionMatrix, LabelMapping, SpecialtyError};
use crate::rng::{stream_rng, LABELS};

/// Row-wise argmax; ties go to the lowest specialty.
pub fn greedy_assign(m: &ConfusionMatrix) -> LabelMapping {
    let assignments = (0..m.rows()).map(|i| argmax(m.row(i))).collect();
    LabelMapping::new(assignments, m.cols().max(1)).expect("argmax is in range")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_divisible(c: usize, k: usize) -> Result<(), SpecialtyError> {
    if k == 0 || k > c {
        return Err(SpecialtyError::InvalidK { c, k });
    }
    if !c.is_multiple_of(k) {
        return Err(SpecialtyError::NotDivisible { c, k });
    }
    Ok(())
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, LABELS));
    order
}

/// Equal-size assignment: classes are visited in a seeded random order and
/// each takes its most-confused specialty among those not yet full.
pub fn fully_balanced_assign(m: &ConfusionMatrix, seed: u64) -> Result<LabelMapping, SpecialtyError> {
    fully_balanced_with_order(m, &permutation(m.rows(), seed))
}

/// [`fully_balanced_assign`] with an explicit visiting order.
pub fn fully_balanced_with_order(
    m: &ConfusionMatrix,
    order: &[usize],
) -> Result<LabelMapping, SpecialtyError> {
    let (c, k) = (m.rows(), m.cols());
    check_divisible(c, k)?;
    let mut seen = vec![false; c];
    if order.len() != c || order.iter().any(|&i| i >= c || std::mem::replace(&mut seen[i], true)) {
        return Err(SpecialtyError::LengthMismatch(format!(
            "visit order is not a permutation of 0..{c}"
        )));
    }
    let cap = c / k;
    let mut sizes = vec![0; k];
    let mut assignments = vec![0; c];
    for &i in order {
        let row = m.row(i);
        let mut best: Option<usize> = None;
        for j in (0..k).filter(|&j| sizes[j] < cap) {
            if best.is_none_or(|b| row[j] > row[b]) {
                best = Some(j);
            }
        }
        let j = best.expect("total capacity equals class count");
        sizes[j] += 1;
        assignments[i] = j;
    }
    LabelMapping::new(assignments, k)
}

/// A seeded uniform permutation of the classes cut into K equal blocks.
pub fn random_balanced(c: usize, k: usize, seed: u64) -> Result<LabelMapping, SpecialtyError> {
    check_divisible(c, k)?;
    let per = c / k;
    let mut assignments = vec![0; c];
    for (pos, &class) in permutation(c, seed).iter().enumerate() {
        assignments[class] = pos / per;
    }
    LabelMapping::new(assignments, k)
}
