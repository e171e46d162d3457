//! Per-batch feature and policy statistics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::networks::DistParams;

/// Across-sample standard deviation below which a tanh unit counts as dead.
pub const TANH_DEAD_STD: f64 = 1e-3;
/// Clamp applied to the partial means of continuous-policy ratios.
pub const RATIO_CLAMP: (f64, f64) = (1e-12, 1e12);

fn column_mean_var(m: &Matrix, c: usize) -> (f64, f64) {
    let n = m.rows() as f64;
    let col = m.column(c);
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Dead penultimate units in a batch of activations (N x D).
///
/// ReLU: columns that are zero for every sample. Tanh: columns whose
/// population standard deviation is below [`TANH_DEAD_STD`].
pub fn dead_neurons(features: &Matrix, activation: Activation) -> Result<usize> {
    if features.rows() == 0 {
        return Err(Error::Empty("dead_neurons batch"));
    }
    Ok((0..features.cols())
        .filter(|&c| match activation {
            Activation::Tanh => column_mean_var(features, c).1.sqrt() < TANH_DEAD_STD,
            _ => (0..features.rows()).all(|r| features.get(r, c) == 0.0),
        })
        .count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub preactivation_norm: f64,
    pub feature_norm: f64,
}

fn mean_row_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    (0..n)
        .map(|r| m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

/// Mean per-sample L2 norms of penultimate pre-activations and activations.
pub fn feature_stats(preacts: &Matrix, acts: &Matrix) -> Result<FeatureStats> {
    if preacts.rows() == 0 || acts.rows() == 0 {
        return Err(Error::Empty("feature_stats batch"));
    }
    Ok(FeatureStats {
        preactivation_norm: mean_row_norm(preacts),
        feature_norm: mean_row_norm(acts),
    })
}

/// How much the policy varies across the states of a batch.
///
/// Categorical: mean over actions of the population variance of `π(a|s)`.
/// TanhNormal: mean over action dimensions of the variance of the mean.
pub fn policy_variance_across_states(dist: &DistParams) -> Result<f64> {
    if dist.rows() < 2 {
        return Err(Error::Config("policy variance needs at least 2 states".into()));
    }
    let m = match dist {
        DistParams::Categorical { logits } => {
            let mut probs = logits.clone();
            for r in 0..probs.rows() {
                let lse = crate::autodiff::log_sum_exp(logits.row(r));
                for p in probs.row_mut(r) {
                    *p = (*p - lse).exp();
                }
            }
            probs
        }
        DistParams::TanhNormal { mean, .. } => mean.clone(),
    };
    let k = m.cols();
    Ok((0..k).map(|c| column_mean_var(&m, c).1).sum::<f64>() / k as f64)
}

/// Mean ratio above `1+ε` over mean ratio below `1−ε`; `None` when either
/// side is empty.
pub fn excess_ratio(ratios: &[f64], eps: f64, continuous_policy: bool) -> Option<f64> {
    let s = ratio_stats(ratios, eps, continuous_policy);
    s.excess_ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub mean_above: Option<f64>,
    pub mean_below: Option<f64>,
    pub excess_ratio: Option<f64>,
    pub n_above: usize,
    pub n_below: usize,
    pub n: usize,
}

pub fn ratio_stats(ratios: &[f64], eps: f64, continuous_policy: bool) -> RatioStats {
    let mean_of = |it: Vec<f64>| {
        if it.is_empty() {
            None
        } else {
            let m = it.iter().sum::<f64>() / it.len() as f64;
            Some(if continuous_policy { m.clamp(RATIO_CLAMP.0, RATIO_CLAMP.1) } else { m })
        }
    };
    let above: Vec<f64> = ratios.iter().copied().filter(|&r| r > 1.0 + eps).collect();
    let below: Vec<f64> = ratios.iter().copied().filter(|&r| r < 1.0 - eps).collect();
    let (n_above, n_below) = (above.len(), below.len());
    let mean_above = mean_of(above);
    let mean_below = mean_of(below);
    RatioStats {
        mean_above,
        mean_below,
        excess_ratio: mean_above.zip(mean_below).map(|(a, b)| a / b),
        n_above,
        n_below,
        n: ratios.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_norm_hand_cases() {
        let pre = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let s = feature_stats(&pre, &pre.map(|x| x.max(0.0))).unwrap();
        assert_eq!((s.preactivation_norm, s.feature_norm), (5.0, 5.0));
        let pre = Matrix::from_rows(&[vec![-3.0, 4.0]]).unwrap();
        let s = feature_stats(&pre, &pre.map(|x| x.max(0.0))).unwrap();
        assert_eq!((s.preactivation_norm, s.feature_norm), (5.0, 4.0));
        let z = Matrix::zeros(4, 3);
        let s = feature_stats(&z, &z).unwrap();
        assert_eq!((s.preactivation_norm, s.feature_norm), (0.0, 0.0));
    }

    #[test]
    fn dead_counts() {
        let f = Matrix::from_rows(&[vec![0.0, 1.0, 0.5], vec![0.0, 0.0, 0.5]]).unwrap();
        assert_eq!(dead_neurons(&f, Activation::Relu).unwrap(), 1);
        assert_eq!(dead_neurons(&f, Activation::Tanh).unwrap(), 2);
        assert!(dead_neurons(&Matrix::zeros(0, 2), Activation::Relu).is_err());
    }

    #[test]
    fn policy_variance_hand_case() {
        let big = 800.0;
        let d = DistParams::Categorical {
            logits: Matrix::from_rows(&[vec![big, 0.0], vec![0.0, big]]).unwrap(),
        };
        assert!((policy_variance_across_states(&d).unwrap() - 0.25).abs() < 1e-15);
        let same = DistParams::Categorical {
            logits: Matrix::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.1]]).unwrap(),
        };
        assert_eq!(policy_variance_across_states(&same).unwrap(), 0.0);
        let one = DistParams::Categorical { logits: Matrix::zeros(1, 2) };
        assert!(policy_variance_across_states(&one).is_err());
    }

    #[test]
    fn excess_ratio_hand_cases() {
        assert_eq!(excess_ratio(&[1.0, 1.05, 0.95], 0.1, false), None);
        assert_eq!(excess_ratio(&[1.3, 0.8], 0.1, false), Some(1.3 / 0.8));
        assert_eq!(excess_ratio(&[1e15, 0.5], 0.2, true), Some(1e12 / 0.5));
        assert_eq!(excess_ratio(&[1e15, 0.5], 0.2, false), Some(2e15));
    }
}
