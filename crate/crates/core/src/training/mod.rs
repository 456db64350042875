//! Classifier pretraining, the synchronous advantage actor-critic loop and
//! the random-selection / full-information baselines.

mod a2c;
mod classifier;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use a2c::{a2c_objective, train, EpisodeRecord, LossParts, StepRecord, TrainedModel, Transition, ValRecord};
pub use classifier::{
    evaluate_hmil_full, evaluate_rs, pretrain_classifier, random_mask_sample, rs_observation, train_classifier, train_hmil_full, train_rs_baseline,
    ClassifierReport, RSPolicy,
};

use crate::dataset::DataError;
use crate::env::EnvError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Hyperparameters. Field names double as the JSON config keys; missing
/// keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Parallel environments per update.
    pub batch_size: usize,
    pub epoch_length: usize,
    /// Training length in epochs; total steps = epochs * epoch_length.
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_epochs` epochs.
    pub lr_decay_epochs: usize,
    pub alpha_v: f64,
    pub alpha_h0: f64,
    /// The entropy weight is multiplied by this every epoch.
    pub alpha_h_decay: f64,
    pub l2: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation episodes per evaluation; `None` uses the whole split.
    pub val_samples: Option<usize>,
    /// Classifier training (pretraining and baselines).
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            gamma: 1.0,
            batch_size: 128,
            epoch_length: 1000,
            epochs: 100,
            lr0: 3e-3,
            lr_decay: 0.5,
            lr_decay_epochs: 10,
            alpha_v: 0.5,
            alpha_h0: 0.05,
            alpha_h_decay: 0.5,
            l2: 1e-4,
            clip_norm: 0.1,
            seed: 0,
            val_samples: None,
            pretrain_lr: 3e-3,
            pretrain_batch: 128,
            pretrain_max_epochs: 100,
            pretrain_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let nonneg = [
            ("lambda", self.lambda),
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("alpha_v", self.alpha_v),
            ("alpha_h0", self.alpha_h0),
            ("alpha_h_decay", self.alpha_h_decay),
            ("l2", self.l2),
            ("clip_norm", self.clip_norm),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.epoch_length == 0 || self.pretrain_batch == 0 {
            return bad("batch_size, epoch_length and pretrain_batch must be at least 1");
        }
        if self.lr_decay_epochs == 0 {
            return bad("lr_decay_epochs must be at least 1");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.epoch_length
    }

    /// Learning rate for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let k = step / (self.lr_decay_epochs * self.epoch_length);
        self.lr0 * self.lr_decay.powi(k as i32)
    }

    /// Entropy weight for the update at 0-based `step`.
    pub fn alpha_h_at(&self, step: usize) -> f64 {
        let k = step / self.epoch_length;
        self.alpha_h0 * self.alpha_h_decay.powi(k as i32)
    }
}
