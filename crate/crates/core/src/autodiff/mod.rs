//! Reverse-mode differentiation over dense double-precision matrices, with
//! Adam, L2 regularization and global-norm gradient clipping.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, RELATIVE_ERROR_FLOOR};
pub use optim::{apply_l2, clip_global_norm, global_grad_norm, AdamState};
pub use params::{ParamId, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tape::{log_softmax_rows, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {0}")]
    Shape(String),
    #[error("log of nonpositive value {0}")]
    NonPositiveLog(f64),
    #[error("backward needs a 1x1 output, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub const BATCHNORM_MOMENTUM: f64 = 0.99;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Running statistics of one batch-normalization layer. The learned scale
/// and shift live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-dimension batch mean and (biased) variance from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average: `running = m * running + (1 - m) * batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (m * *r + (1.0 - m) * b).max(0.0);
        }
    }
}
