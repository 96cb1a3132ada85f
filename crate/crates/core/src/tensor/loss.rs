use super::{Scalar, Tensor, TensorError};

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    label: usize,
) -> Result<(T, Vec<T>), TensorError> {
    if label >= logits.len() {
        return Err(TensorError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    // -log softmax = log(sum exp(z - max)) - (z_label - max)
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / total).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Batched softmax cross-entropy over an `N x K` logit tensor.
///
/// Returns the summed loss and the (unscaled) gradient; the optimizer divides
/// by the batch size.
pub fn batch_softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    let n = logits.batch();
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            expected: format!("{n} labels"),
            found: format!("{} labels", labels.len()),
        });
    }
    let k = logits.sample_len();
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(n * k);
    for (s, &label) in labels.iter().enumerate() {
        let (loss, g) = softmax_cross_entropy(logits.sample(s), label)?;
        total += loss;
        grad.extend(g);
    }
    Ok((total, Tensor::new(vec![n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let (loss, _) = softmax_cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_has_near_zero_loss() {
        let (loss, _) = softmax_cross_entropy(&[100.0f64, 0.0], 0).unwrap();
        assert!(loss < 1e-10);
        assert!(loss.is_finite());
    }

    #[test]
    fn symmetric_gradient() {
        for label in 0..3 {
            let (_, g) = softmax_cross_entropy(&[1.0f64, 1.0, 1.0], label).unwrap();
            for (i, v) in g.iter().enumerate() {
                let want = 1.0 / 3.0 - if i == label { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f32, 1.0], 2),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn huge_logits_stay_finite() {
        let (loss, g) = softmax_cross_entropy(&[1e4f32, -1e4, 3e3], 1).unwrap();
        assert!(loss.is_finite());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&z);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
