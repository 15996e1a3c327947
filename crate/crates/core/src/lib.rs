//! Desk-scale benchmarking library for unsupervised domain adaptation:
//! small MLP stacks trained on synthetic domain shifts, a zoo of UDA loss
//! recipes, label-free checkpoint validators, random hyperparameter search,
//! and the downstream correlation/gap analysis.

pub mod algorithms;
pub mod analysis;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod rng;
pub mod svd;
pub mod tensor;
pub mod validators;

pub use error::{Error, Result};
pub use rng::Stream;
pub use tensor::Tensor;
