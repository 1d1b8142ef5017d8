use crate::error::{Error, Result};

/// Central-difference gradient check.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)` where
/// `numeric_i = (L(θ + εe_i) − L(θ − εe_i)) / 2ε`.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic_grads: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    if params.len() != analytic_grads.len() {
        return Err(Error::shape(format!(
            "{} params vs {} gradients",
            params.len(),
            analytic_grads.len()
        )));
    }
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let plus = loss_fn(&theta);
        theta[i] = orig - epsilon;
        let minus = loss_fn(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while probing coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic_grads[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
