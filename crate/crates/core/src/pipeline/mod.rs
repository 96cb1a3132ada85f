//! The two training stages and inference.
//!
//! Stage one alternates SGD on a K-way generalist with reassignment of the
//! class-to-specialty mapping from the generalist's confusion on a stratified
//! subset. Stage two copies the generalist's convolutional prefix into a
//! trunk, attaches one freshly initialized branch per specialty, and trains
//! the tree end to end under one softmax over all classes.

mod engine;
mod eval;
mod flat;
mod generalist;
mod nofe;
mod retrieval;

use serde::Serialize;
use thiserror::Error;

use crate::dataio::{DataError, Record};
use crate::netspec::NetSpecError;
use crate::specialty::SpecialtyError;
use crate::tensor::TensorError;

pub use engine::{epoch_batches, Model, CHUNK};
pub use eval::{evaluate_top1, predict, specialty_accuracy, CropMode};
pub use flat::{load_trained_net, train_flat, TrainedNet};
pub use generalist::{
    generalist_loss, generalist_spec, stratified_subset, train_generalist, EpochRecord,
    GeneralistConfig, GeneralistResult, MappingSnapshot, Method,
};
pub use nofe::{
    build_nofe, class_slots, finetune_nofe, load_nofe, nofe_forward, FinetuneResult, NofEGrads,
    NofENetwork,
};
pub use retrieval::{extract_features, nn_retrieve, FeatureTag};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    NetSpec(#[from] NetSpecError),
    #[error(transparent)]
    Specialty(#[from] SpecialtyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration: {0}")]
    Config(String),
    /// Training produced a NaN or infinity. `last_finite` holds the
    /// parameters from before the offending step, when they are available.
    #[error("non-finite {what} in {stage} at step {step}")]
    NonFinite {
        stage: String,
        step: usize,
        what: String,
        last_finite: Option<Vec<Record>>,
    },
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specialty_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    pub mapping_hash: String,
}

/// Receives metric records as training progresses.
pub type MetricSink<'a> = &'a mut dyn FnMut(&MetricRecord);

/// A sink that drops everything.
pub fn discard_metrics(_: &MetricRecord) {}

#[cfg(test)]
mod tests;
