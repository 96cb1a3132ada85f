//! Minimal reverse-mode engine for the layer vocabulary used by the shipped
//! architectures: convolution, max/average pooling, fully-connected, relu and
//! local response normalization, with softmax cross-entropy on top and SGD
//! with momentum and weight decay as the only optimizer.
//!
//! Layout is `N x C x H x W` for images and `N x F` for feature vectors. Each
//! layer's forward pass returns a [`LayerCache`]; the matching backward pass
//! consumes it, accumulates parameter gradients into detached
//! [`ParamGrads`] buffers and returns the input gradient.

mod array;
pub mod gradcheck;
mod init;
mod kernels;
mod layers;
mod loss;
mod network;
mod optim;

pub use array::{Scalar, Tensor};
pub use gradcheck::{grad_check, GradCheckReport};
pub use init::{initialize_layer, InitScheme};
pub use layers::{
    conv2d, conv_output_dim, fully_connected, lrn, pool2d, pool_output_dim, relu, ConvParams,
    Layer, LayerCache, LayerKind, LrnParams, ParamGrads, PoolKind, PoolParams,
};
pub use loss::{batch_softmax_cross_entropy, softmax, softmax_cross_entropy};
pub use network::{Network, NetworkGrads};
pub use optim::{sgd_step, OptimizerState};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: {detail}")]
    InvalidOutput { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}
