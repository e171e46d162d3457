//! Generalized advantage estimation.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Denominator stabilizer for per-minibatch advantage normalization.
pub const ADV_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lambda: 0.95 }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Backward GAE recursion over one trajectory segment.
///
/// `bootstrap_value` is `V(S_T)` for the state after the last step; it is
/// ignored when the last step terminated. Returns `(advantages, returns)`
/// with `returns[t] = advantages[t] + values[t]`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    terminated: &[bool],
    cfg: &GaeConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || terminated.len() != n {
        return Err(shape_err(
            "compute_gae",
            format!("rewards {n}, values {}, terminated {}", values.len(), terminated.len()),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if terminated[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + cfg.gamma * next_value * live - values[t];
        next_adv = delta + cfg.gamma * cfg.lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// `(A − mean) / (std + 1e-8)` with the population standard deviation.
pub fn normalize_advantages(advantages: &[f64]) -> Result<Vec<f64>> {
    let n = advantages.len();
    if n < 2 {
        return Err(Error::Config(format!("advantage normalization needs at least 2 samples, got {n}")));
    }
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + ADV_NORM_EPS;
    Ok(advantages.iter().map(|a| (a - mean) / denom).collect())
}
