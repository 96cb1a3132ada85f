use super::{Scalar, Tensor, TensorError};

/// SGD with momentum and L2 weight decay.
///
/// Update rule per parameter `w` with accumulated gradient `g`:
/// `v <- momentum * v - lr * (g / batch + decay * w)`, then `w <- w + v`.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a, I>(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        params: I,
    ) -> Result<Self, TensorError>
    where
        I: IntoIterator<Item = &'a Tensor<T>>,
    {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::InvalidHyperparameter(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::InvalidHyperparameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(TensorError::InvalidHyperparameter(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        let velocity = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.velocity
    }

    /// Applies one update to `params` (same order and shapes as at construction),
    /// reading each parameter's gradient slot. Parameters without a gradient are
    /// treated as having zero gradient.
    pub fn step<'a, I>(&mut self, params: I, batch_size: usize) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        if batch_size == 0 {
            return Err(TensorError::InvalidHyperparameter(
                "batch size must be positive".into(),
            ));
        }
        let lr = T::from_f64_lossy(self.learning_rate);
        let mu = T::from_f64_lossy(self.momentum);
        let decay = T::from_f64_lossy(self.weight_decay);
        let inv_batch = T::one() / T::from_usize(batch_size).unwrap();
        let mut count = 0;
        for (param, vel) in params.into_iter().zip(self.velocity.iter_mut()) {
            count += 1;
            if param.shape() != vel.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    expected: format!("{:?}", vel.shape()),
                    found: format!("{:?}", param.shape()),
                });
            }
            let grad: Vec<T> = match param.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); param.len()],
            };
            let v = vel.values_mut();
            let w = param.values_mut();
            for i in 0..w.len() {
                v[i] = mu * v[i] - lr * (grad[i] * inv_batch + decay * w[i]);
                w[i] += v[i];
            }
        }
        if count != self.velocity.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                expected: format!("{} parameter tensors", self.velocity.len()),
                found: format!("{count}"),
            });
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn sgd_step<'a, T: Scalar, I>(
    params: I,
    opt: &mut OptimizerState<T>,
    batch_size: usize,
) -> Result<(), TensorError>
where
    I: IntoIterator<Item = &'a mut Tensor<T>>,
{
    opt.step(params, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![w]).unwrap();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn plain_gradient_step() {
        let mut w = scalar_param(5.0, 2.0);
        let mut opt = OptimizerState::new(1.0, 0.0, 0.0, [&w]).unwrap();
        sgd_step([&mut w], &mut opt, 1).unwrap();
        assert_eq!(w.values(), &[3.0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut w = scalar_param(1.25, 0.0);
        let mut opt = OptimizerState::new(0.3, 0.0, 0.0, [&w]).unwrap();
        sgd_step([&mut w], &mut opt, 4).unwrap();
        assert_eq!(w.values(), &[1.25]);
    }

    #[test]
    fn momentum_carries_prior_velocity() {
        let mut w = scalar_param(0.0, 0.0);
        let mut opt = OptimizerState::new(0.7, 0.9, 0.0, [&w]).unwrap();
        opt.velocity_mut()[0].values_mut()[0] = 1.0;
        sgd_step([&mut w], &mut opt, 1).unwrap();
        assert!((w.values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decay_pulls_towards_zero_and_batch_scales_gradient() {
        let mut w = scalar_param(2.0, 4.0);
        let mut opt = OptimizerState::new(0.1, 0.0, 0.5, [&w]).unwrap();
        sgd_step([&mut w], &mut opt, 4).unwrap();
        // v = -0.1 * (4/4 + 0.5*2) = -0.2
        assert!((w.values()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_loss_decreases_every_step() {
        let mut w = Tensor::new(vec![1], vec![3.0f64]).unwrap();
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, [&w]).unwrap();
        let mut prev = 9.0;
        for _ in 0..50 {
            let g = 2.0 * w.values()[0];
            w.set_grad(vec![g]).unwrap();
            sgd_step([&mut w], &mut opt, 1).unwrap();
            let loss = w.values()[0].powi(2);
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let w = Tensor::<f32>::zeros(&[1]);
        assert!(OptimizerState::new(0.1, 1.0, 0.0, [&w]).is_err());
        assert!(OptimizerState::new(-0.1, 0.0, 0.0, [&w]).is_err());
        assert!(OptimizerState::new(0.1, 0.0, -1.0, [&w]).is_err());
    }
}
