use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{ConfusionMatrix, IndicatorMatrix, LabelMapping, SpecialtyError};
use crate::rng::{stream_rng, LABELS};

pub const DEFAULT_LAMBDA: f64 = 1000.0;
pub const DEFAULT_MAX_SWEEPS: usize = 100;
/// Largest `K^C` the exhaustive search accepts.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// `sqrt(sum_j (sum_i F_ij)^2)`.
pub fn exclusive_lasso_norm(f: &IndicatorMatrix) -> f64 {
    norm_of_sizes(&f.column_sums())
}

fn norm_of_sizes(sizes: &[usize]) -> f64 {
    sizes.iter().map(|&s| (s * s) as f64).sum::<f64>().sqrt()
}

/// The objective for one assignment vector. Everything that compares
/// objectives goes through here so equal assignments give bit-equal values.
fn objective(assign: &[usize], sizes: &[usize], m: &ConfusionMatrix, lambda: f64) -> f64 {
    let hits: f64 = assign.iter().enumerate().map(|(i, &j)| m.get(i, j)).sum();
    lambda * norm_of_sizes(sizes) - hits
}

/// `lambda * ||F||_e - sum_ij M_ij F_ij`.
pub fn elasso_objective(
    f: &IndicatorMatrix,
    m: &ConfusionMatrix,
    lambda: f64,
) -> Result<f64, SpecialtyError> {
    if f.rows() != m.rows() || f.cols() != m.cols() {
        return Err(SpecialtyError::ShapeMismatch {
            expected: format!("{}x{}", m.rows(), m.cols()),
            found: format!("{}x{}", f.rows(), f.cols()),
        });
    }
    let assign: Vec<usize> = (0..f.rows()).map(|i| f.column_of(i)).collect();
    Ok(objective(&assign, &f.column_sums(), m, lambda))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElassoResult {
    pub indicator: IndicatorMatrix,
    /// Objective before any update, then after every row update.
    pub trace: Vec<f64>,
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl ElassoResult {
    pub fn mapping(&self) -> LabelMapping {
        self.indicator.to_mapping()
    }
}

/// Row-wise coordinate descent on the elasso objective.
///
/// Each sweep visits rows in a fresh seeded order and moves the row's 1 to
/// the column minimizing the objective with every other row fixed. The
/// incumbent wins ties; among strictly better columns the lowest index wins.
/// Stops after a sweep with no change or after `max_sweeps`.
pub fn elasso_assign(
    m: &ConfusionMatrix,
    lambda: f64,
    init: &LabelMapping,
    seed: u64,
    max_sweeps: usize,
) -> Result<ElassoResult, SpecialtyError> {
    let (c, k) = (m.rows(), m.cols());
    if init.classes() != c || init.specialties() != k {
        return Err(SpecialtyError::ShapeMismatch {
            expected: format!("mapping over {c} classes into {k}"),
            found: format!("{} classes into {}", init.classes(), init.specialties()),
        });
    }
    if max_sweeps == 0 {
        return Err(SpecialtyError::LengthMismatch("max_sweeps must be at least 1".into()));
    }
    let mut assign = init.as_slice().to_vec();
    let mut sizes = init.sizes();
    let mut current = objective(&assign, &sizes, m, lambda);
    let mut trace = vec![current];
    let mut rng = stream_rng(seed, LABELS);
    let mut order: Vec<usize> = (0..c).collect();
    let mut sweeps = 0;
    let mut converged = false;

    while sweeps < max_sweeps {
        sweeps += 1;
        order.shuffle(&mut rng);
        let mut changed = false;
        for &i in &order {
            let from = assign[i];
            let (mut best_j, mut best) = (from, current);
            for j in (0..k).filter(|&j| j != from) {
                assign[i] = j;
                sizes[from] -= 1;
                sizes[j] += 1;
                let value = objective(&assign, &sizes, m, lambda);
                sizes[j] -= 1;
                sizes[from] += 1;
                if value < best {
                    best = value;
                    best_j = j;
                }
            }
            assign[i] = best_j;
            if best_j != from {
                sizes[from] -= 1;
                sizes[best_j] += 1;
                changed = true;
            }
            current = best;
            trace.push(current);
        }
        if !changed {
            converged = true;
            break;
        }
    }
    let indicator = LabelMapping::new(assign, k)?.to_indicator();
    Ok(ElassoResult {
        indicator,
        trace,
        objective: current,
        sweeps,
        converged,
    })
}

/// Exhaustive minimum over all `K^C` indicators. Ties go to the
/// lexicographically smallest assignment vector.
pub fn brute_force_elasso(
    m: &ConfusionMatrix,
    lambda: f64,
) -> Result<(IndicatorMatrix, f64), SpecialtyError> {
    let (c, k) = (m.rows(), m.cols());
    if k == 0 {
        return Err(SpecialtyError::InvalidK { c, k });
    }
    let total = (k as u64)
        .checked_pow(c as u32)
        .filter(|&t| t <= BRUTE_FORCE_LIMIT)
        .ok_or(SpecialtyError::TooLarge { c, k })?;
    let decode = |mut code: u64, assign: &mut [usize], sizes: &mut [usize]| {
        sizes.iter_mut().for_each(|s| *s = 0);
        // row 0 is the most significant digit, so numeric order is lexicographic
        for slot in assign.iter_mut().rev() {
            *slot = (code % k as u64) as usize;
            code /= k as u64;
            sizes[*slot] += 1;
        }
    };
    let (value, code) = (0..total)
        .into_par_iter()
        .map_init(
            || (vec![0usize; c], vec![0usize; k]),
            |(assign, sizes), code| {
                decode(code, assign, sizes);
                (objective(assign, sizes, m, lambda), code)
            },
        )
        .reduce(
            || (f64::INFINITY, u64::MAX),
            |a, b| match a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) {
                std::cmp::Ordering::Greater => b,
                _ => a,
            },
        );
    let mut assign = vec![0; c];
    let mut sizes = vec![0; k];
    decode(code, &mut assign, &mut sizes);
    Ok((LabelMapping::new(assign, k)?.to_indicator(), value))
}
