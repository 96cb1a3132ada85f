use std::path::Path;

use super::engine::{assign_params, epoch_batches, expected_records, optimizer, records, train_step, Model};
use super::{MetricRecord, MetricSink, PipelineError};
use crate::dataio::{load_checkpoint, save_checkpoint, Dataset, Preprocessor, Record};
use crate::netspec::{NetSpec, TrainPolicy};
use crate::rng::{stream_rng, AUGMENT, INIT, SHUFFLE};
use crate::tensor::{initialize_layer, Network};

pub(crate) const MEAN_RECORD: &str = "input.mean";

/// A chain network together with the input statistics it was trained on.
#[derive(Clone, Debug)]
pub struct TrainedNet {
    pub spec: NetSpec,
    pub network: Network<f32>,
    pub mean: Vec<f32>,
    pub image_shape: [usize; 3],
}

impl TrainedNet {
    /// Fresh weights per the netspec's init scheme, drawn from the init stream.
    pub fn init(spec: &NetSpec, mean: Vec<f32>, image_shape: [usize; 3], seed: u64) -> Result<Self, PipelineError> {
        let mut layers = spec.instantiate::<f32>()?;
        let mut rng = stream_rng(seed, INIT);
        for layer in &mut layers {
            initialize_layer(layer, spec.policy().init, &mut rng);
        }
        let net = Self {
            spec: spec.clone(),
            network: Network::new(layers),
            mean,
            image_shape,
        };
        net.preprocessor(spec.policy())?;
        Ok(net)
    }

    /// Preprocessing for this net's inputs under `policy`'s augmentation.
    pub fn preprocessor(&self, policy: &TrainPolicy) -> Result<Preprocessor, PipelineError> {
        let pre = Preprocessor::new(self.mean.clone(), self.image_shape, policy);
        check_input(&pre, self.spec.input_shape())?;
        Ok(pre)
    }

    pub fn records(&self) -> Vec<Record> {
        let [c, h, w] = self.image_shape;
        let mut out = vec![Record {
            name: MEAN_RECORD.into(),
            shape: vec![c, h, w],
            values: self.mean.clone(),
        }];
        out.extend(records(&self.network));
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(save_checkpoint(path, &self.records())?)
    }
}

pub(crate) fn check_input(pre: &Preprocessor, input: [usize; 3]) -> Result<(), PipelineError> {
    if pre.output_shape() != input {
        return Err(PipelineError::Config(format!(
            "preprocessed images are {:?} but the network expects {input:?}",
            pre.output_shape()
        )));
    }
    Ok(())
}

/// Loads a checkpoint written by [`TrainedNet::save`] for `spec`.
pub fn load_trained_net(path: &Path, spec: &NetSpec, image_shape: [usize; 3]) -> Result<TrainedNet, PipelineError> {
    let mut net = TrainedNet::init(spec, vec![0.0; image_shape.iter().product()], image_shape, 0)?;
    let mut expected = vec![(MEAN_RECORD.to_string(), image_shape.to_vec())];
    expected.extend(expected_records(&net.network));
    let mut values = load_checkpoint(path, &expected)?;
    net.mean = values.remove(0);
    assign_params(&mut net.network, values);
    Ok(net)
}

/// Callbacks driving one training run.
pub(crate) trait FitHooks<M> {
    /// Training target of a sample with class `label`.
    fn target(&self, label: usize) -> usize;

    /// Called after every SGD step, `step` counting from 1.
    fn after_step(&mut self, _model: &M, _epoch: usize, _step: usize, _steps_per_epoch: usize) -> Result<(), PipelineError> {
        Ok(())
    }

    fn end_epoch(&mut self, model: &M, epoch: usize, step: usize, mean_loss: f64) -> Result<(), PipelineError>;
}

/// Runs the policy's epochs of minibatch SGD; returns the per-step losses.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit<M: Model<f32>, H: FitHooks<M>>(
    model: &mut M,
    data: &Dataset,
    pre: &Preprocessor,
    policy: &TrainPolicy,
    seed: u64,
    deterministic: bool,
    stage: &str,
    hooks: &mut H,
) -> Result<Vec<f64>, PipelineError> {
    policy.validate().map_err(PipelineError::Config)?;
    if data.is_empty() {
        return Err(PipelineError::Config("empty training set".into()));
    }
    let mut opt = optimizer(model, policy.momentum, policy.weight_decay)?;
    let mut shuffle = stream_rng(seed, SHUFFLE);
    let mut augment = stream_rng(seed, AUGMENT);
    let steps_per_epoch = data.len().div_ceil(policy.batch_size);
    let mut losses = Vec::with_capacity(steps_per_epoch * policy.total_epochs());
    for epoch in 0..policy.total_epochs() {
        opt.learning_rate = policy.learning_rate_at(epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in epoch_batches(data.len(), policy.batch_size, &mut shuffle) {
            let x = pre.train_batch(data, &batch, &mut augment);
            let targets: Vec<usize> = batch.iter().map(|&i| hooks.target(data.labels[i])).collect();
            let loss = train_step(model, &mut opt, &x, &targets, deterministic, stage, losses.len())?;
            losses.push(loss);
            sum += loss * batch.len() as f64;
            count += batch.len();
            hooks.after_step(model, epoch, losses.len(), steps_per_epoch)?;
        }
        hooks.end_epoch(model, epoch, losses.len(), sum / count as f64)?;
    }
    model.params_mut().into_iter().for_each(|p| p.clear_grad());
    Ok(losses)
}

struct FlatHooks<'a, 'b> {
    stage: &'a str,
    sink: MetricSink<'b>,
}

impl FitHooks<Network<f32>> for FlatHooks<'_, '_> {
    fn target(&self, label: usize) -> usize {
        label
    }

    fn end_epoch(&mut self, _: &Network<f32>, epoch: usize, step: usize, loss: f64) -> Result<(), PipelineError> {
        (self.sink)(&MetricRecord {
            stage: self.stage.to_string(),
            epoch,
            step,
            loss,
            specialty_accuracy: None,
            top1: None,
            mapping_hash: String::new(),
        });
        Ok(())
    }
}

/// Trains `spec` from scratch on the original labels, with its own training policy.
pub fn train_flat(
    train: &Dataset,
    spec: &NetSpec,
    seed: u64,
    deterministic: bool,
    sink: MetricSink<'_>,
) -> Result<TrainedNet, PipelineError> {
    if spec.output_width() != train.classes {
        return Err(PipelineError::Config(format!(
            "network has {} outputs for {} classes",
            spec.output_width(),
            train.classes
        )));
    }
    let pre = Preprocessor::from_training_set(train, spec.policy());
    let mut net = TrainedNet::init(spec, pre.mean().to_vec(), train.image_shape, seed)?;
    let mut hooks = FlatHooks { stage: "flat", sink };
    fit(&mut net.network, train, &pre, spec.policy(), seed, deterministic, "flat", &mut hooks)?;
    Ok(net)
}
