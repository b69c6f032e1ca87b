//! Epoch loop: seeded shuffling, Adam steps on the smooth-L1 loss,
//! validation, plateau scheduling, early stopping and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TrainConfig;
use super::optim::{clip_grad_norm, Adam};
use super::scheduler::PlateauScheduler;
use crate::autograd::Graph;
use crate::dataio::{collate, AugmentConfig, AugmentDraw, Batch, PreparedSample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{load_checkpoint_as, save_checkpoint, CheckpointMeta, Model};
use crate::nnblocks::apply_stat_updates;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_mae: Option<f64>,
}

pub trait ProgressSink {
    fn epoch_end(&mut self, record: &EpochRecord);
}

/// Reports through the `log` facade.
pub struct LogSink;

impl ProgressSink for LogSink {
    fn epoch_end(&mut self, r: &EpochRecord) {
        match r.train_mae {
            Some(t) => log::info!(
                "epoch {:>3}  loss {:.4}  train MAE {:.3}  val MAE {:.3}  lr {:.3e}",
                r.epoch,
                r.train_loss,
                t,
                r.val_mae,
                r.lr
            ),
            None => log::info!(
                "epoch {:>3}  loss {:.4}  val MAE {:.3}  lr {:.3e}",
                r.epoch,
                r.train_loss,
                r.val_mae,
                r.lr
            ),
        }
    }
}

pub struct NullSink;

impl ProgressSink for NullSink {
    fn epoch_end(&mut self, _: &EpochRecord) {}
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub scheduler: PlateauScheduler,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub adam_steps: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn current_lr(&self) -> f64 {
        self.scheduler.lr
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stopped_early: bool,
    pub reached_target: bool,
}

/// Inference-mode predictions for `samples`, in order.
pub fn predict_samples(model: &Model, samples: &[PreparedSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let b = collate(&refs, None);
        out.extend(model.predict(&b.images, &b.maps, &b.genders)?);
    }
    Ok(out)
}

pub fn mean_absolute_error(preds: &[f64], samples: &[PreparedSample]) -> f64 {
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| (p - s.bone_age).abs())
        .sum::<f64>()
        / samples.len() as f64
}

/// One optimizer step on `batch` in training mode; returns the batch loss
/// measured before the update.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, lr: f64, grad_clip: Option<f64>) -> Result<f64> {
    let (loss, mut grads, stats) = {
        let mut g = Graph::with_params(&model.params, true, true);
        let x = g.constant(batch.images.clone());
        let m = g.constant(batch.maps.clone());
        let out = model.net.forward(&mut g, x, m, &batch.genders)?;
        let loss_node = g.smooth_l1_loss(out.output, &batch.labels);
        let loss = g.value(loss_node).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample_ids: batch.ids.clone(),
            });
        }
        let grads = g.backward(loss_node).into_param_grads();
        let stats = g.take_stat_updates();
        (loss, grads, stats)
    };
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    adam.step(&mut model.params, &grads, lr);
    apply_stat_updates(&mut model.params, &stats);
    Ok(loss)
}

/// Shuffled sample order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Split `n` samples into batches of at most `batch_size`. With `balanced`
/// the sizes differ by at most one, so no batch is left with a handful of
/// samples; otherwise the last batch takes the remainder.
pub fn batch_bounds(n: usize, batch_size: usize, balanced: bool) -> Vec<std::ops::Range<usize>> {
    let batch_size = batch_size.max(1);
    let count = n.div_ceil(batch_size);
    (0..count)
        .map(|k| {
            if balanced {
                k * n / count..(k + 1) * n / count
            } else {
                k * batch_size..((k + 1) * batch_size).min(n)
            }
        })
        .collect()
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    /// Where checkpoints and history go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

impl Trainer<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    fn fresh_state(&self) -> TrainState {
        TrainState {
            epoch: 0,
            scheduler: PlateauScheduler::new(self.config.plateau, self.config.initial_lr),
            best_val_mae: None,
            best_epoch: None,
            epochs_since_improvement: 0,
            adam_steps: 0,
            history: Vec::new(),
        }
    }

    /// Restore model, optimizer and state from `last.ckpt`, if present.
    fn try_resume(&self, model: &mut Model) -> Result<Option<(TrainState, Adam, Option<Model>)>> {
        let Some(last) = self.path(LAST_CHECKPOINT) else {
            return Err(Error::InvalidArgument("resuming requires an output directory".into()));
        };
        if !last.exists() {
            log::warn!("{} not found; starting a fresh run", last.display());
            return Ok(None);
        }
        let ck = load_checkpoint_as(&last, model.config())?;
        let state: TrainState = ck
            .meta
            .train_state
            .clone()
            .ok_or_else(|| Error::Checkpoint {
                path: last.clone(),
                reason: "no trainer state recorded".into(),
            })
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::Checkpoint {
                    path: last.clone(),
                    reason: format!("bad trainer state: {e}"),
                })
            })?;
        let adam = Adam::import(self.config.adam, state.adam_steps, &ck.model.params, &ck.extras);
        let best = match self.path(BEST_CHECKPOINT) {
            Some(p) if p.exists() => Some(load_checkpoint_as(&p, model.config())?.model),
            _ => None,
        };
        *model = ck.model;
        log::info!("resuming after epoch {}", state.epoch);
        Ok(Some((state, adam, best)))
    }

    fn write_history(&self, history: &[EpochRecord]) -> Result<()> {
        if let Some(p) = self.path(HISTORY_FILE) {
            let mut s = String::new();
            for r in history {
                s.push_str(&serde_json::to_string(r).expect("record serializes"));
                s.push('\n');
            }
            write_atomic(&p, s.as_bytes())?;
        }
        Ok(())
    }

    /// Train `model` in place and leave it holding the best-validation weights.
    pub fn run(
        &self,
        model: &mut Model,
        train: &[PreparedSample],
        val: &[PreparedSample],
        resume: bool,
        sink: &mut dyn ProgressSink,
    ) -> Result<TrainOutcome> {
        let tc = self.config;
        tc.validate()?;
        self.augment.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        if tc.batch_size > train.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training samples",
                tc.batch_size,
                train.len()
            )));
        }
        let size = model.config().input_size;
        if let Some(bad) = train.iter().chain(val).find(|s| s.image.width() != size || s.image.height() != size) {
            return Err(Error::shape(
                format!("sample {}", bad.sample_id),
                (size, size),
                (bad.image.width(), bad.image.height()),
            ));
        }

        let resumed = if resume { self.try_resume(model)? } else { None };
        let (mut state, mut adam, mut best_model) = match resumed {
            Some(r) => r,
            None => {
                if tc.init_output_bias {
                    let mean = train.iter().map(|s| s.bone_age).sum::<f64>() / train.len() as f64;
                    model.set_output_bias(mean);
                }
                (self.fresh_state(), Adam::new(tc.adam, model.params.len()), None)
            }
        };

        let mut stopped_early = false;
        let mut reached_target = false;
        while state.epoch < tc.epochs {
            if tc.early_stopping_patience.is_some_and(|p| state.epochs_since_improvement >= p) {
                stopped_early = true;
                break;
            }
            if let (Some(target), Some(last)) = (tc.target_train_mae, state.history.last()) {
                if last.train_mae.is_some_and(|m| m < target) {
                    reached_target = true;
                    break;
                }
            }
            let epoch = state.epoch + 1;
            let lr = state.scheduler.lr;
            let order = epoch_order(tc.seed, epoch, train.len());
            let mut loss_sum = 0.0;
            for range in batch_bounds(order.len(), tc.batch_size, tc.balanced_batches) {
                let idx = &order[range];
                let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &train[i]).collect();
                let draws: Option<Vec<AugmentDraw>> = self.augment.enabled.then(|| {
                    idx.iter()
                        .map(|&i| AugmentDraw::for_sample(self.augment, size, tc.seed, epoch, i))
                        .collect()
                });
                let batch = collate(&samples, draws.as_deref());
                let loss = train_step(model, &mut adam, &batch, lr, tc.grad_clip)?;
                loss_sum += loss * idx.len() as f64;
            }
            let train_loss = loss_sum / train.len() as f64;
            let val_mae = mean_absolute_error(&predict_samples(model, val, tc.eval_batch_size)?, val);
            let train_mae = if tc.track_train_mae {
                Some(mean_absolute_error(&predict_samples(model, train, tc.eval_batch_size)?, train))
            } else {
                None
            };
            if !val_mae.is_finite() {
                return Err(Error::Data(format!("validation MAE became non-finite at epoch {epoch}")));
            }

            let record = EpochRecord {
                epoch,
                train_loss,
                val_mae,
                lr,
                train_mae,
            };
            sink.epoch_end(&record);
            state.history.push(record);
            state.scheduler.step(val_mae);
            state.epoch = epoch;
            state.adam_steps = adam.t;

            let improved = state.best_val_mae.is_none_or(|b| val_mae < b);
            if improved {
                state.best_val_mae = Some(val_mae);
                state.best_epoch = Some(epoch);
                state.epochs_since_improvement = 0;
                best_model = Some(model.clone());
            } else {
                state.epochs_since_improvement += 1;
            }

            let metrics = json!({
                "train_loss": train_loss,
                "val_mae": val_mae,
                "best_val_mae": state.best_val_mae,
                "history": state.history,
            });
            if improved {
                if let Some(p) = self.path(BEST_CHECKPOINT) {
                    let mut meta = CheckpointMeta::new(epoch, tc.seed);
                    meta.metrics = metrics.clone();
                    save_checkpoint(&p, model, &meta, &[])?;
                }
            }
            if let Some(p) = self.path(LAST_CHECKPOINT) {
                let mut meta = CheckpointMeta::new(epoch, tc.seed);
                meta.metrics = metrics;
                meta.train_state = Some(serde_json::to_value(&state).expect("state serializes"));
                save_checkpoint(&p, model, &meta, &adam.export(&model.params))?;
            }
            self.write_history(&state.history)?;
        }
        if !reached_target {
            if let (Some(target), Some(last)) = (tc.target_train_mae, state.history.last()) {
                reached_target = last.train_mae.is_some_and(|m| m < target);
            }
        }

        if let Some(best) = best_model {
            *model = best;
        }
        Ok(TrainOutcome {
            history: state.history,
            best_epoch: state.best_epoch,
            best_val_mae: state.best_val_mae,
            stopped_early,
            reached_target,
        })
    }
}

/// Train with the given configuration, reporting through `sink`.
pub fn train(
    model: &mut Model,
    train: &[PreparedSample],
    val: &[PreparedSample],
    config: &TrainConfig,
    augment: &AugmentConfig,
    out_dir: Option<&Path>,
    sink: &mut dyn ProgressSink,
) -> Result<TrainOutcome> {
    Trainer {
        config,
        augment,
        out_dir: out_dir.map(Path::to_path_buf),
    }
    .run(model, train, val, false, sink)
}
