//! Minimal adversarial perturbations for layered classifiers.
//!
//! The crate computes the smallest perturbation that flips a classifier's
//! decision by iteratively linearizing the decision boundaries (the DeepFool
//! family of attacks), benchmarks the resulting robustness estimates against
//! a fast gradient sign baseline and a penalized descent oracle, and supports
//! fine-tuning models on their own adversarial examples.
//!
//! Modules mirror the pipeline: `tensor` holds the forward/backward kernel,
//! `models` the classifier types and their file format, `attacks` the
//! perturbation algorithms, `robustness` the benchmark harness, `training`
//! SGD and fine-tuning, `data` dataset I/O, and `cli` the command-line tool.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod robustness;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Activation, DenseTensor, GradientTape, Layer};
