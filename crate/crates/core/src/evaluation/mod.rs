//! Error statistics, stratified reports and result plots.

pub mod metrics;
pub mod plot;
pub mod report;

use serde::{Deserialize, Serialize};

pub use self::metrics::{cumulative_accuracy, mae, pearson, rmse};
pub use self::plot::{render_panels, write_panels};
pub use self::report::{
    age_group, stratified_report, EvalReport, PredictionRecord, Stats, AGE_GROUPS, DEFAULT_THRESHOLDS,
};

use crate::dataio::PreparedSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::predict_samples;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cumulative-accuracy thresholds in months.
    pub thresholds: Vec<f64>,
    /// Include per-gender and per-age-group breakdowns in reports.
    pub strata: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            strata: true,
            batch_size: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Config("eval.thresholds must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Parse a comma-separated threshold list such as `6,12`.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    let out = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| Error::InvalidArgument(format!("bad threshold {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::InvalidArgument("no thresholds given".into()));
    }
    Ok(out)
}

pub fn predict_records(model: &Model, samples: &[PreparedSample], batch_size: usize) -> Result<Vec<PredictionRecord>> {
    let preds = predict_samples(model, samples, batch_size)?;
    Ok(samples
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionRecord {
            sample_id: s.sample_id.clone(),
            gender: s.gender,
            bone_age: s.bone_age,
            predicted: p,
        })
        .collect())
}

/// Predict every sample and build the report.
pub fn evaluate(model: &Model, samples: &[PreparedSample], cfg: &EvalConfig) -> Result<(Vec<PredictionRecord>, EvalReport)> {
    let records = predict_records(model, samples, cfg.batch_size)?;
    let mut report = stratified_report(&records, &cfg.thresholds)?;
    if !cfg.strata {
        report.strata.clear();
    }
    Ok((records, report))
}
