use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let s: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p).abs()).sum();
    Ok(s / preds.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let s: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok((s / preds.len() as f64).sqrt())
}

/// Fraction of samples with `|y - y_hat| <= threshold`.
pub fn cumulative_accuracy(preds: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    check_pair(preds, labels)?;
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be non-negative, got {threshold}")));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| (*y - *p).abs() <= threshold).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Sample correlation and its two-sided p-value under a t-distribution with
/// `n - 2` degrees of freedom.
pub fn pearson(preds: &[f64], labels: &[f64]) -> Result<(f64, f64)> {
    check_pair(preds, labels)?;
    let n = preds.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("pearson needs at least 3 samples, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mp, ml) = (mean(preds), mean(labels));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        let (dp, dy) = (p - mp, y - ml);
        sxy += dp * dy;
        sxx += dp * dp;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson is undefined for a constant sequence".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    // With t = r sqrt(df / (1 - r^2)), 2 P(T > |t|) = I_{df / (df + t^2)}(df/2, 1/2)
    // and df / (df + t^2) simplifies to 1 - r^2.
    let df = (n - 2) as f64;
    let x = (1.0 - r * r).max(0.0);
    let p = if x == 0.0 { 0.0 } else { beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0) };
    Ok((r, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert_eq!(mae(&[10.0, 20.0], &[13.0, 16.0]).unwrap(), 3.5);
        assert_eq!(rmse(&[0.0], &[3.0]).unwrap(), 3.0);
        assert!((rmse(&[1.0, 2.0], &[3.0, 6.0]).unwrap() - 10f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[1.0, 2.0], &[3.0, 6.0]).unwrap() - 3.16228).abs() < 1e-5);
        let l = [0.0, 0.0, 0.0];
        assert_eq!(cumulative_accuracy(&[1.0, 7.0, 13.0], &l, 6.0).unwrap(), 1.0 / 3.0);
        assert_eq!(cumulative_accuracy(&[5.0, 5.0], &[5.0, 5.0], 0.0).unwrap(), 1.0);
        assert_eq!(cumulative_accuracy(&[6.0], &[0.0], 6.0).unwrap(), 1.0);
    }

    #[test]
    fn perfect_correlations() {
        let y = [1.0, 4.0, 2.0, 8.0, 5.0];
        let (r, p) = pearson(&y, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!(p < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| 3.0 - v).collect();
        let (r, _) = pearson(&neg, &y).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
    }

    #[test]
    fn errors_are_defined() {
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(cumulative_accuracy(&[1.0], &[1.0], -1.0).is_err());
    }
}
