//! Differential ordinal learning for ordinal image classification.
//!
//! A small ViT-style encoder is trained jointly on categorical
//! cross-entropy and a pairwise differential objective: for every
//! ordered pair of samples in a batch, a bias-free linear head predicts
//! the signed difference of their ordinal labels from the difference of
//! their feature vectors. The differential arm uses the negative
//! absolute difference log-likelihood (NAD) loss by default, with
//! MSE/MAE/ordinal-CE ablation arms.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pairing;
pub mod rng;

pub use error::{Error, Result};
