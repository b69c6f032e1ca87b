use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use super::scheduler::PlateauConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Spread each epoch evenly over `ceil(n / batch_size)` batches instead
    /// of leaving a short final batch.
    pub balanced_batches: bool,
    pub initial_lr: f64,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    /// Stop after this many epochs without a new best validation MAE;
    /// `None` disables early stopping.
    pub early_stopping_patience: Option<usize>,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Start the output bias at the mean training label.
    pub init_output_bias: bool,
    /// Also measure inference-mode MAE on the training set every epoch.
    pub track_train_mae: bool,
    /// Finish as soon as the tracked training MAE falls below this.
    pub target_train_mae: Option<f64>,
    /// Batch size for inference passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 17,
            balanced_batches: true,
            initial_lr: 1e-3,
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            early_stopping_patience: Some(20),
            grad_clip: None,
            seed: 0,
            init_output_bias: true,
            track_train_mae: false,
            target_train_mae: None,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.plateau.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.target_train_mae.is_some() && !self.track_train_mae {
            return Err(Error::Config("target_train_mae requires track_train_mae".into()));
        }
        Ok(())
    }
}
