//! Network-of-Experts training pipeline.
//!
//! A generalist network is trained jointly with a learned partition of the
//! classes into specialties; the generalist's convolutional prefix then
//! becomes the shared trunk of a tree with one expert branch per specialty,
//! and the whole tree is fine-tuned under a single softmax over all classes.
//!
//! Modules, bottom-up:
//! - [`tensor`]: the reverse-mode CNN engine and optimizer.
//! - [`netspec`]: the architecture description language, structural
//!   transforms and parameter counting.
//! - [`specialty`]: confusion matrices and class-to-specialty assignment.
//! - [`dataio`]: datasets, preprocessing and checkpoints.
//! - [`pipeline`]: generalist training, tree construction, fine-tuning and
//!   evaluation.
//! - [`cli`]: the command-line surface.

pub mod cli;
pub mod dataio;
pub mod netspec;
pub mod pipeline;
pub mod rng;
pub mod specialty;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
