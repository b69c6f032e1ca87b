use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{cumulative_accuracy, mae, pearson, rmse};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [6.0, 12.0];

/// Age groups by true bone age in months, lower bound inclusive.
pub const AGE_GROUPS: [(&str, f64); 4] = [("<1", 0.0), ("1-7", 12.0), ("8-15", 96.0), ("16-20", 192.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub gender: u8,
    pub bone_age: f64,
    pub predicted: f64,
}

pub fn age_group(months: f64) -> &'static str {
    AGE_GROUPS
        .iter()
        .rev()
        .find(|(_, lo)| months >= *lo)
        .map_or(AGE_GROUPS[0].0, |(name, _)| name)
}

pub fn gender_name(gender: u8) -> &'static str {
    if gender == 1 {
        "male"
    } else {
        "female"
    }
}

/// Summary statistics of one set of records. Fields are null when undefined:
/// everything for an empty set, the correlation for fewer than three samples
/// or constant values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
    /// Keyed by the threshold in months.
    pub cum_acc: BTreeMap<String, Option<f64>>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

impl Stats {
    pub fn compute(records: &[&PredictionRecord], thresholds: &[f64]) -> Result<Stats> {
        let preds: Vec<f64> = records.iter().map(|r| r.predicted).collect();
        let labels: Vec<f64> = records.iter().map(|r| r.bone_age).collect();
        if records.is_empty() {
            return Ok(Stats {
                n: 0,
                mae: None,
                rmse: None,
                pearson_r: None,
                pearson_p: None,
                cum_acc: thresholds.iter().map(|&t| (threshold_key(t), None)).collect(),
            });
        }
        let corr = pearson(&preds, &labels).ok();
        let mut cum_acc = BTreeMap::new();
        for &t in thresholds {
            cum_acc.insert(threshold_key(t), Some(cumulative_accuracy(&preds, &labels, t)?));
        }
        Ok(Stats {
            n: records.len(),
            mae: Some(mae(&preds, &labels)?),
            rmse: Some(rmse(&preds, &labels)?),
            pearson_r: corr.map(|c| c.0),
            pearson_p: corr.map(|c| c.1),
            cum_acc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Stats,
    pub thresholds: Vec<f64>,
    /// Per gender ("female", "male") and per age group.
    pub strata: BTreeMap<String, Stats>,
}

pub fn stratified_report(records: &[PredictionRecord], thresholds: &[f64]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot report on zero predictions".into()));
    }
    if let Some(r) = records.iter().find(|r| !r.predicted.is_finite() || !r.bone_age.is_finite()) {
        return Err(Error::Sample {
            sample_id: r.sample_id.clone(),
            reason: "non-finite prediction or label".into(),
        });
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let mut strata = BTreeMap::new();
    for g in [0u8, 1] {
        let sub: Vec<_> = all.iter().copied().filter(|r| r.gender == g).collect();
        strata.insert(gender_name(g).to_string(), Stats::compute(&sub, thresholds)?);
    }
    for (name, _) in AGE_GROUPS {
        let sub: Vec<_> = all.iter().copied().filter(|r| age_group(r.bone_age) == name).collect();
        strata.insert(name.to_string(), Stats::compute(&sub, thresholds)?);
    }
    Ok(EvalReport {
        overall: Stats::compute(&all, thresholds)?,
        thresholds: thresholds.to_vec(),
        strata,
    })
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

fn p_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"))
}

impl EvalReport {
    /// Plain-text table, one row per set of records.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:<8} {:>6} {:>8} {:>8} {:>7} {:>10}", "group", "n", "MAE", "RMSE", "r", "p");
        for t in &self.thresholds {
            let _ = write!(head, " {:>8}", format!("<={t}m"));
        }
        let mut out = head.clone();
        out.push('\n');
        out.push_str(&"-".repeat(head.len()));
        out.push('\n');
        let mut row = |name: &str, s: &Stats| {
            let _ = write!(
                out,
                "{:<8} {:>6} {:>8} {:>8} {:>7} {:>10}",
                name,
                s.n,
                cell(s.mae, 3),
                cell(s.rmse, 3),
                cell(s.pearson_r, 4),
                p_cell(s.pearson_p)
            );
            for t in &self.thresholds {
                let v = s.cum_acc.get(&threshold_key(*t)).copied().flatten();
                let _ = write!(out, " {:>8}", v.map_or("-".to_string(), |x| format!("{:.1}%", 100.0 * x)));
            }
            out.push('\n');
        };
        row("all", &self.overall);
        for name in ["female", "male"].into_iter().chain(AGE_GROUPS.iter().map(|g| g.0)) {
            if let Some(s) = self.strata.get(name) {
                row(name, s);
            }
        }
        out
    }
}
