//! Reduce-on-plateau learning-rate schedule driven by validation MAE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub cooldown: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 2,
            factor: 0.8,
            cooldown: 5,
            min_lr: 0.0,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must be in (0, 1), got {}", self.factor)));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::Config("min_lr must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    /// Consecutive epochs without strict improvement.
    pub num_bad_epochs: usize,
    pub cooldown_remaining: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            cfg,
            lr,
            best: None,
            num_bad_epochs: 0,
            cooldown_remaining: 0,
            reductions: 0,
        }
    }

    /// Feed one epoch's metric; returns the learning rate for the next epoch.
    ///
    /// Any strict decrease counts as improvement. While cooling down the bad
    /// epoch counter is held at zero, so after a reduction the next one needs
    /// `cooldown + patience + 1` further stagnant epochs.
    pub fn step(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
            self.num_bad_epochs = 0;
        } else {
            self.num_bad_epochs += 1;
        }
        if self.cooldown_remaining > 0 {
            self.cooldown_remaining -= 1;
            self.num_bad_epochs = 0;
        }
        if self.num_bad_epochs > self.cfg.patience {
            let new_lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            if new_lr < self.lr {
                self.lr = new_lr;
                self.reductions += 1;
            }
            self.cooldown_remaining = self.cfg.cooldown;
            self.num_bad_epochs = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(metrics: &[f64]) -> Vec<f64> {
        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-3);
        metrics.iter().map(|&m| s.step(m)).collect()
    }

    #[test]
    fn improving_run_keeps_lr() {
        let t = trace(&[10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0]);
        assert!(t.iter().all(|&lr| lr == 1e-3));
    }

    #[test]
    fn fourth_flat_epoch_reduces() {
        let t = trace(&[10.0, 10.0, 10.0, 10.0]);
        assert_eq!(&t[..3], &[1e-3, 1e-3, 1e-3]);
        assert_eq!(t[3], 1e-3 * 0.8);
    }

    #[test]
    fn cooldown_blocks_the_next_reduction() {
        let t = trace(&[10.0; 14]);
        // Hand walk: reduce after epoch 4; epochs 5-9 cool down; bad epochs
        // count again from 10 and exceed patience at 12.
        let r1 = 1e-3 * 0.8;
        let r2 = r1 * 0.8;
        let expected = [1e-3, 1e-3, 1e-3, r1, r1, r1, r1, r1, r1, r1, r1, r2, r2, r2];
        assert_eq!(t, expected);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lr_equals_initial_times_factor_power() {
        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-3);
        for i in 0..60 {
            s.step(if i % 7 == 0 { 5.0 - i as f64 * 1e-3 } else { 100.0 });
            assert!((s.lr - 1e-3 * 0.8f64.powi(s.reductions as i32)).abs() < 1e-18);
        }
    }

    #[test]
    fn validates_factor() {
        assert!(PlateauConfig { factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(PlateauConfig { factor: 0.0, ..Default::default() }.validate().is_err());
        assert!(PlateauConfig::default().validate().is_ok());
    }
}
