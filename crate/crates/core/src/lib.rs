//! Multi-task transfer learning with a pretrain-adapt-finetune schedule and a
//! language-to-vision adapter, at desk scale.
//!
//! The crate covers synthetic partially labeled data ([`data`]), a toy
//! backbone with a multi-scale adapter ([`model`]), task heads and losses
//! ([`heads`]), prompt-driven language guidance ([`language`]), staged
//! training ([`train`]), pseudo labeling ([`self_training`]), metrics
//! ([`eval`]) and experiment orchestration ([`experiment`]).

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod language;
pub mod model;
pub mod nn;
pub mod params;
pub mod self_training;
pub mod task;
pub mod train;
pub mod tensor;
#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
pub use task::{PerTask, Task};
pub use tensor::Tensor;
