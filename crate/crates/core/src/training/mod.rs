//! Smooth-L1 regression training with Adam and a reduce-on-plateau schedule.

pub mod config;
pub mod loss;
pub mod optim;
pub mod scheduler;
pub mod trainer;

pub use config::TrainConfig;
pub use loss::{smooth_l1, smooth_l1_grad, smooth_l1_mean, smooth_l1_pair};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use scheduler::{PlateauConfig, PlateauScheduler};
pub use trainer::{
    batch_bounds, epoch_order, mean_absolute_error, predict_samples, train, train_step, EpochRecord, LogSink, NullSink,
    ProgressSink, TrainOutcome, TrainState, Trainer, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT,
};
