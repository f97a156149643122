//! Dense tensors, reverse-mode differentiation, sampling and Adam.

mod adam;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use params::{BoundParams, ModelParams};
pub use rng::{Stream, StreamRng};
pub use tape::{dropout_mask, Gradients, Tape, Var, PROB_FLOOR};
pub(crate) use tape::{bernoulli_log_likelihood_value, logistic};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `0.5·Σ(μ² + σ² − 1 − ln σ²)` on plain slices.
pub fn kl_diag_normal(mu: &[f64], sigma_sq: &[f64]) -> Result<f64> {
    if mu.len() != sigma_sq.len() {
        return Err(Error::Dimension {
            op: "kl_diag_normal",
            lhs: vec![mu.len()],
            rhs: vec![sigma_sq.len()],
        });
    }
    if sigma_sq.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::invalid("kl_diag_normal", "variance must be strictly positive"));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma_sq)
            .map(|(&m, &v)| m * m + v - 1.0 - v.ln())
            .sum::<f64>())
}

/// Numerically stable softmax of one vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax", "empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}
