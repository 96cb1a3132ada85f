use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use super::{ConfusionMatrix, LabelMapping, SpecialtyError};
use crate::rng::{stream_rng, LABELS};

const RESTARTS: usize = 10;
const LLOYD_ITERS: usize = 100;

/// Normalized spectral clustering of a square class-confusion matrix.
///
/// The affinity is the symmetrized matrix with its diagonal zeroed. Classes
/// are embedded by the top-K eigenvectors of `D^-1/2 A D^-1/2` (rows scaled to
/// unit length) and clustered by k-means++ with 10 seeded restarts, keeping
/// the lowest inertia. Classes with zero affinity to every other class are
/// then placed one at a time into the currently smallest cluster.
pub fn spectral_assign(
    m: &ConfusionMatrix,
    k: usize,
    seed: u64,
) -> Result<LabelMapping, SpecialtyError> {
    let c = m.rows();
    if m.cols() != c {
        return Err(SpecialtyError::ShapeMismatch {
            expected: format!("{c}x{c}"),
            found: format!("{c}x{}", m.cols()),
        });
    }
    if k == 0 || k > c {
        return Err(SpecialtyError::InvalidK { c, k });
    }
    let affinity = DMatrix::from_fn(c, c, |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (m.get(i, j) + m.get(j, i))
        }
    });
    let degree: Vec<f64> = (0..c).map(|i| affinity.row(i).sum()).collect();
    let connected: Vec<usize> = (0..c).filter(|&i| degree[i] > 0.0).collect();
    let isolated: Vec<usize> = (0..c).filter(|&i| degree[i] <= 0.0).collect();

    let mut assignments = vec![0usize; c];
    let mut sizes = vec![0usize; k];
    if !connected.is_empty() {
        let n = connected.len();
        let inv_sqrt: Vec<f64> = connected.iter().map(|&i| 1.0 / degree[i].sqrt()).collect();
        let l = DMatrix::from_fn(n, n, |a, b| {
            inv_sqrt[a] * affinity[(connected[a], connected[b])] * inv_sqrt[b]
        });
        let eig = SymmetricEigen::new(l);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let dims = k.min(n);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut v: Vec<f64> = idx[..dims].iter().map(|&e| eig.eigenvectors[(r, e)]).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect();
        let labels = kmeans(&points, k, seed);
        for (a, &class) in connected.iter().enumerate() {
            assignments[class] = labels[a];
            sizes[labels[a]] += 1;
        }
    }
    for class in isolated {
        let smallest = (0..k).min_by_key(|&j| (sizes[j], j)).expect("k >= 1");
        assignments[class] = smallest;
        sizes[smallest] += 1;
    }
    let mapping = LabelMapping::new(assignments, k)?;
    let canonical = mapping.canonical();
    LabelMapping::new(canonical, k)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best-of-restarts k-means; returns a cluster per point.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, LABELS);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RESTARTS {
        let (inertia, labels) = lloyd(points, plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // Every point sits on a center; fall back to an unused point, if any.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            if free.is_empty() {
                rng.random_range(0..n)
            } else {
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[pick] = true;
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (f64, Vec<usize>) {
    let dim = points.first().map_or(0, Vec::len);
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (j, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                center[d] = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    (inertia, labels)
}
