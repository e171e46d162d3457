//! Metric time series: windowed aggregation, smoothing and correlations
//! between pairs of series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EWMA_COEFF: f64 = 0.05;
pub const WINDOW_FRAC: f64 = 0.05;
/// Present entries required before the last-non-trivial-ratio window applies.
pub const MIN_NONTRIVIAL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Tail,
    LastNontrivialRatio,
}

/// Mean of the present values in a step window of width
/// `window_frac · run_length`.
///
/// `Tail` ends the window at `run_length`. `LastNontrivialRatio` ends it at
/// the last step holding a present value, and yields `None` unless the
/// series holds at least [`MIN_NONTRIVIAL`] present values. The window is
/// `(upper − width, upper]`.
pub fn window_aggregate(
    series: &[(u64, Option<f64>)],
    run_length: u64,
    window_frac: f64,
    mode: WindowMode,
) -> Option<f64> {
    if series.is_empty() || !(window_frac > 0.0) {
        return None;
    }
    let width = window_frac * run_length as f64;
    let upper = match mode {
        WindowMode::Tail => run_length as f64,
        WindowMode::LastNontrivialRatio => {
            let present: Vec<u64> = series.iter().filter(|(_, v)| v.is_some()).map(|(s, _)| *s).collect();
            if present.len() < MIN_NONTRIVIAL {
                return None;
            }
            *present.iter().max()? as f64
        }
    };
    let lower = upper - width;
    let vals: Vec<f64> = series
        .iter()
        .filter(|(s, _)| (*s as f64) > lower && (*s as f64) <= upper)
        .filter_map(|(_, v)| *v)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `s₀ = x₀`, `s_t = c·x_t + (1−c)·s_{t−1}`.
pub fn ewma_smooth(series: &[f64], coeff: f64) -> Result<Vec<f64>> {
    if !(coeff > 0.0 && coeff <= 1.0) {
        return Err(Error::Config(format!("ewma coefficient must lie in (0, 1], got {coeff}")));
    }
    let mut out = Vec::with_capacity(series.len());
    for (i, &x) in series.iter().enumerate() {
        let s = if i == 0 { x } else { coeff * x + (1.0 - coeff) * out[i - 1] };
        out.push(s);
    }
    Ok(out)
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Kendall's τ-b. `None` for constant or too-short inputs.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n || is_constant(x) || is_constant(y) {
        return None;
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0)? as i8;
            let dy = (y[i] - y[j]).partial_cmp(&0.0)? as i8;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + tie_x) as f64;
    let n2 = (concordant + discordant + tie_y) as f64;
    Some((concordant - discordant) as f64 / (n1 * n2).sqrt())
}

/// Pearson correlation. `None` for constant or too-short inputs.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n || is_constant(x) || is_constant(y) {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `√Σ(x_t − y_t)² / (√T · L)`.
pub fn normalized_l2(x: &[f64], y: &[f64], width: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() || width == 0 {
        return Err(crate::error::shape_err(
            "normalized_l2",
            format!("lengths {} and {}, width {width}", x.len(), y.len()),
        ));
    }
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss.sqrt() / ((x.len() as f64).sqrt() * width as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub kendall_tau: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub pearson_r: Option<f64>,
    pub normalized_l2: Option<f64>,
}

pub fn pair_correlation(x: &[f64], y: &[f64], width: usize) -> Result<PairCorrelation> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(crate::error::shape_err(
            "pair_correlation",
            format!("need aligned series of length ≥ 2, got {} and {}", x.len(), y.len()),
        ));
    }
    Ok(PairCorrelation {
        kendall_tau: kendall_tau(x, y),
        spearman_rho: spearman(x, y),
        pearson_r: pearson(x, y),
        normalized_l2: Some(normalized_l2(x, y, width)?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub per_run: Vec<PairCorrelation>,
    /// Means over the runs where each value is defined.
    pub mean: PairCorrelation,
    /// Smallest correlations and largest distance across runs.
    pub worst: PairCorrelation,
}

/// Correlations for one pair of metrics across several runs.
pub fn rank_correlations(runs: &[(Vec<f64>, Vec<f64>)], width: usize) -> Result<CorrelationSummary> {
    if runs.is_empty() {
        return Err(Error::Empty("rank_correlations runs"));
    }
    let per_run = runs
        .iter()
        .map(|(x, y)| pair_correlation(x, y, width))
        .collect::<Result<Vec<_>>>()?;
    let collect = |f: fn(&PairCorrelation) -> Option<f64>| -> Vec<f64> { per_run.iter().filter_map(f).collect() };
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let min = |v: Vec<f64>| v.into_iter().reduce(f64::min);
    let max = |v: Vec<f64>| v.into_iter().reduce(f64::max);
    Ok(CorrelationSummary {
        mean: PairCorrelation {
            kendall_tau: mean(collect(|p| p.kendall_tau)),
            spearman_rho: mean(collect(|p| p.spearman_rho)),
            pearson_r: mean(collect(|p| p.pearson_r)),
            normalized_l2: mean(collect(|p| p.normalized_l2)),
        },
        worst: PairCorrelation {
            kendall_tau: min(collect(|p| p.kendall_tau)),
            spearman_rho: min(collect(|p| p.spearman_rho)),
            pearson_r: min(collect(|p| p.pearson_r)),
            normalized_l2: max(collect(|p| p.normalized_l2)),
        },
        per_run,
    })
}
