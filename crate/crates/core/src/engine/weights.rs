use crate::error::{Error, Result};

/// Unnormalized importance weights `s^(1 / t_smc)`. Scores should already be
/// floored at epsilon.
pub fn compute_weights(scores: &[f64], t_smc: f64) -> Vec<f64> {
    let exponent = 1.0 / t_smc;
    scores.iter().map(|s| s.powf(exponent)).collect()
}

/// Effective sample size `(Σw)² / Σw²`.
pub fn compute_ess(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if !(sum > 0.0) || !(sum_sq > 0.0) {
        return Err(Error::DegeneratePopulation);
    }
    // Rounding can push the ratio a hair outside [1, N].
    Ok((sum * sum / sum_sq).clamp(1.0, weights.len() as f64))
}
