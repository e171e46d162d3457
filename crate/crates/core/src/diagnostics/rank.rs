//! Singular values of feature matrices and the five feature-rank measures.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::matrix::Matrix;

/// Default threshold for approximate rank and srank.
pub const RANK_DELTA: f64 = 0.01;
/// Default threshold for the absolute feature rank.
pub const FEATURE_RANK_DELTA: f64 = 0.01;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in
/// descending order.
///
/// Sweeps continue until the off-diagonal Frobenius norm falls below
/// `1e-12 · ‖A‖_F` (or below `1e-12` for a zero matrix).
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape_err("symmetric_eigenvalues", format!("{:?} is not square", a.shape())));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("symmetric_eigenvalues input"));
    }
    let mut m = a.data().to_vec();
    let scale = a.frobenius_norm().max(1.0);
    let off = |m: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&m) < JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// Singular values of `phi` (N x D, D < N), descending, via the Jacobi
/// eigenvalues of the D x D Gram matrix. Round-off negatives clamp to 0.
pub fn singular_values(phi: &Matrix) -> Result<Vec<f64>> {
    singular_values_with(phi, Execution::default())
}

pub fn singular_values_with(phi: &Matrix, exec: Execution) -> Result<Vec<f64>> {
    let (n, d) = phi.shape();
    if d == 0 || d >= n {
        return Err(shape_err("singular_values", format!("need 0 < D < N, got N={n}, D={d}")));
    }
    if !phi.all_finite() {
        return Err(Error::NonFinite("feature matrix"));
    }
    let eig = symmetric_eigenvalues(&phi.gram(exec))?;
    Ok(eig.into_iter().map(|e| e.max(0.0).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub effective_rank: f64,
    pub approximate_rank: usize,
    pub srank: usize,
    pub feature_rank_abs: usize,
    pub epsilon_rank: usize,
    #[serde(skip)]
    pub singular_values: Vec<f64>,
}

/// Smallest `k` whose partial sum of `terms` exceeds `(1 − δ)` of the total.
fn threshold_rank(terms: &[f64], delta: f64) -> usize {
    let total: f64 = terms.iter().sum();
    let mut acc = 0.0;
    for (k, t) in terms.iter().enumerate() {
        acc += t;
        if acc / total > 1.0 - delta {
            return k + 1;
        }
    }
    terms.len()
}

/// All five rank measures from a descending spectrum of an `n_samples`-row
/// feature matrix.
pub fn rank_report_from_singular_values(
    sigma: &[f64],
    n_samples: usize,
    delta: f64,
    feature_rank_delta: f64,
) -> RankReport {
    let l1: f64 = sigma.iter().sum();
    if sigma.is_empty() || l1 == 0.0 {
        return RankReport {
            effective_rank: 0.0,
            approximate_rank: 0,
            srank: 0,
            feature_rank_abs: 0,
            epsilon_rank: 0,
            singular_values: sigma.to_vec(),
        };
    }
    let entropy: f64 = sigma
        .iter()
        .map(|&s| s / l1)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let squares: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let sqrt_n = (n_samples as f64).sqrt();
    let top = sigma[0];
    RankReport {
        effective_rank: entropy.exp(),
        approximate_rank: threshold_rank(&squares, delta),
        srank: threshold_rank(sigma, delta),
        feature_rank_abs: sigma.iter().filter(|&&s| s / sqrt_n > feature_rank_delta).count(),
        epsilon_rank: sigma
            .iter()
            .filter(|&&s| s / (top * n_samples as f64) > f64::EPSILON)
            .count(),
        singular_values: sigma.to_vec(),
    }
}

pub fn rank_report(phi: &Matrix, delta: f64, feature_rank_delta: f64) -> Result<RankReport> {
    let sigma = singular_values(phi)?;
    Ok(rank_report_from_singular_values(&sigma, phi.rows(), delta, feature_rank_delta))
}
