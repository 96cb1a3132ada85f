use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::PipelineError;
use crate::dataio::Record;
use crate::tensor::{batch_softmax_cross_entropy, Network, NetworkGrads, OptimizerState, Scalar, Tensor};

/// Samples per gradient work unit. Chunk boundaries depend only on the batch,
/// so the reduction order is the same for any worker count.
pub const CHUNK: usize = 16;

/// Anything trained by softmax cross-entropy over its per-sample outputs.
pub trait Model<T: Scalar>: Sync {
    type Grads: Send + Sync;

    /// Raw class scores, `N x outputs`.
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, PipelineError>;

    /// Summed loss over the batch and summed parameter gradients.
    fn loss_and_grads(&self, x: &Tensor<T>, targets: &[usize]) -> Result<(T, Self::Grads), PipelineError>;

    fn add_grads(acc: &mut Self::Grads, other: &Self::Grads);

    fn grads_finite(g: &Self::Grads) -> bool;

    /// Copies `g` into the parameters' gradient slots.
    fn load_grads(&mut self, g: &Self::Grads);

    fn params(&self) -> Vec<&Tensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Checkpoint names, in [`Model::params`] order.
    fn param_names(&self) -> Vec<String>;
}

impl<T: Scalar> Model<T> for Network<T> {
    type Grads = NetworkGrads<T>;

    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, PipelineError> {
        let out = self.predict(x)?;
        let shape = vec![out.batch(), out.sample_len()];
        Ok(out.reshape(shape)?)
    }

    fn loss_and_grads(&self, x: &Tensor<T>, targets: &[usize]) -> Result<(T, Self::Grads), PipelineError> {
        let (out, caches) = self.forward(x)?;
        let (loss, grad) = batch_softmax_cross_entropy(&out, targets)?;
        let grad = grad.reshape(out.shape().to_vec())?;
        let mut grads = self.zero_grads();
        self.backward(&caches, &grad, &mut grads);
        Ok((loss, grads))
    }

    fn add_grads(acc: &mut Self::Grads, other: &Self::Grads) {
        acc.add_assign(other);
    }

    fn grads_finite(g: &Self::Grads) -> bool {
        g.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn load_grads(&mut self, g: &Self::Grads) {
        Network::load_grads(self, g);
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        Network::params(self).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Network::params_mut(self).collect()
    }

    fn param_names(&self) -> Vec<String> {
        Network::param_names(self, "net")
    }
}

pub(crate) fn slice_samples<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let len = x.sample_len();
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, x.values()[start * len..end * len].to_vec()).expect("slice within batch")
}

fn chunk_bounds(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect()
}

/// Loss and gradients of a whole batch, computed chunk by chunk.
///
/// In deterministic mode chunk results are summed strictly in chunk order.
pub fn batch_loss_and_grads<T: Scalar, M: Model<T>>(
    model: &M,
    x: &Tensor<T>,
    targets: &[usize],
    deterministic: bool,
) -> Result<(T, M::Grads), PipelineError> {
    let run = |&(s, e): &(usize, usize)| model.loss_and_grads(&slice_samples(x, s, e), &targets[s..e]);
    let bounds = chunk_bounds(x.batch());
    let combine = |a: Result<(T, M::Grads), PipelineError>, b: Result<(T, M::Grads), PipelineError>| {
        let (mut la, mut ga) = a?;
        let (lb, gb) = b?;
        la += lb;
        M::add_grads(&mut ga, &gb);
        Ok((la, ga))
    };
    if deterministic {
        let parts: Vec<_> = bounds.par_iter().map(run).collect();
        parts
            .into_iter()
            .reduce(combine)
            .expect("non-empty batch")
    } else {
        bounds.par_iter().map(run).reduce_with(combine).expect("non-empty batch")
    }
}

/// One SGD update on a batch; returns the mean loss before the update.
///
/// Nothing is changed if the loss or any gradient is non-finite.
pub(crate) fn train_step<M: Model<f32>>(
    model: &mut M,
    opt: &mut OptimizerState<f32>,
    x: &Tensor<f32>,
    targets: &[usize],
    deterministic: bool,
    stage: &str,
    step: usize,
) -> Result<f64, PipelineError> {
    let n = targets.len();
    let (loss, grads) = batch_loss_and_grads(model, x, targets, deterministic)?;
    let non_finite = |what: &str, model: &M| PipelineError::NonFinite {
        stage: stage.to_string(),
        step,
        what: what.to_string(),
        last_finite: Some(records(model)),
    };
    if !loss.is_finite() {
        return Err(non_finite("loss", model));
    }
    if !M::grads_finite(&grads) {
        return Err(non_finite("gradient", model));
    }
    let before = records(model);
    model.load_grads(&grads);
    opt.step(model.params_mut(), n)?;
    if !model.params().iter().all(|p| p.values().iter().all(|v| v.is_finite())) {
        return Err(PipelineError::NonFinite {
            stage: stage.to_string(),
            step,
            what: "parameters".into(),
            last_finite: Some(before),
        });
    }
    Ok(f64::from(loss) / n as f64)
}

/// Raw scores for every sample, computed in chunks.
pub(crate) fn batched_logits<T: Scalar, M: Model<T>>(model: &M, x: &Tensor<T>) -> Result<Vec<Vec<T>>, PipelineError> {
    let parts: Vec<Result<Tensor<T>, PipelineError>> = chunk_bounds(x.batch())
        .par_iter()
        .map(|&(s, e)| model.logits(&slice_samples(x, s, e)))
        .collect();
    let mut rows = Vec::with_capacity(x.batch());
    for part in parts {
        let t = part?;
        rows.extend((0..t.batch()).map(|i| t.sample(i).to_vec()));
    }
    Ok(rows)
}

/// Named parameter records in checkpoint order.
pub(crate) fn records<M: Model<f32>>(model: &M) -> Vec<Record> {
    model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(name, p)| Record {
            name,
            shape: p.shape().to_vec(),
            values: p.values().to_vec(),
        })
        .collect()
}

/// Overwrites parameters from checkpoint values (already shape-checked).
pub(crate) fn assign_params<M: Model<f32>>(model: &mut M, values: Vec<Vec<f32>>) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        p.values_mut().copy_from_slice(&v);
    }
}

pub(crate) fn expected_records<M: Model<f32>>(model: &M) -> Vec<(String, Vec<usize>)> {
    model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(n, p)| (n, p.shape().to_vec()))
        .collect()
}

/// A shuffled partition of `0..n` into batches; the last may be short.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn optimizer<M: Model<f32>>(
    model: &M,
    momentum: f64,
    weight_decay: f64,
) -> Result<OptimizerState<f32>, PipelineError> {
    Ok(OptimizerState::new(0.0, momentum, weight_decay, model.params())?)
}
