use crate::error::{Error, Result};

/// Smooth L1 of a residual `d = y - y_hat`: quadratic inside `|d| < 1`,
/// linear outside, with both branches equal to 0.5 at the knee.
pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`] with respect to `d`.
pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Checked loss for a single pair.
pub fn smooth_l1_pair(y: f64, y_hat: f64) -> Result<f64> {
    if !y.is_finite() || !y_hat.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smooth_l1 needs finite inputs, got y={y}, y_hat={y_hat}"
        )));
    }
    Ok(smooth_l1(y - y_hat))
}

/// Mean smooth L1 over a batch.
pub fn smooth_l1_mean(labels: &[f64], preds: &[f64]) -> Result<f64> {
    if labels.is_empty() || labels.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "smooth_l1 batch lengths {} and {}",
            labels.len(),
            preds.len()
        )));
    }
    let mut total = 0.0;
    for (&y, &p) in labels.iter().zip(preds) {
        total += smooth_l1_pair(y, p)?;
    }
    Ok(total / labels.len() as f64)
}
