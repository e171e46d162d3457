//! Categorical and TanhNormal policy heads: sampling, log-probabilities and
//! entropies.
//!
//! Log-probabilities are always computed through graph nodes, including at
//! collection time, so a stored log-probability and its recomputation during
//! optimization share one code path and agree to the last bit.

use crate::autodiff::{log_sum_exp, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::HeadNodes;

/// Stabilizer inside `log(1 − tanh(u)² + ε)`.
pub const TANH_EPS: f64 = 1e-6;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub enum DistParams {
    Categorical { logits: Matrix },
    TanhNormal { mean: Matrix, std: Matrix },
}

impl DistParams {
    pub fn rows(&self) -> usize {
        match self {
            DistParams::Categorical { logits } => logits.rows(),
            DistParams::TanhNormal { mean, .. } => mean.rows(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        match self {
            DistParams::Categorical { logits } => DistParams::Categorical {
                logits: logits.select_rows(idx),
            },
            DistParams::TanhNormal { mean, std } => DistParams::TanhNormal {
                mean: mean.select_rows(idx),
                std: std.select_rows(idx),
            },
        }
    }

    pub fn vstack(parts: &[DistParams]) -> Result<Self> {
        match parts.first() {
            Some(DistParams::Categorical { .. }) => {
                let mut ls = Vec::with_capacity(parts.len());
                for p in parts {
                    match p {
                        DistParams::Categorical { logits } => ls.push(logits.clone()),
                        _ => return Err(shape_err("DistParams::vstack", "mixed kinds")),
                    }
                }
                Ok(DistParams::Categorical {
                    logits: Matrix::vstack(&ls)?,
                })
            }
            Some(DistParams::TanhNormal { .. }) => {
                let (mut ms, mut ss) = (Vec::new(), Vec::new());
                for p in parts {
                    match p {
                        DistParams::TanhNormal { mean, std } => {
                            ms.push(mean.clone());
                            ss.push(std.clone());
                        }
                        _ => return Err(shape_err("DistParams::vstack", "mixed kinds")),
                    }
                }
                Ok(DistParams::TanhNormal {
                    mean: Matrix::vstack(&ms)?,
                    std: Matrix::vstack(&ss)?,
                })
            }
            None => Err(Error::Empty("DistParams::vstack")),
        }
    }

    /// Whether every row carries exactly the same parameters.
    pub fn rows_identical(&self) -> bool {
        let mats: Vec<&Matrix> = match self {
            DistParams::Categorical { logits } => vec![logits],
            DistParams::TanhNormal { mean, std } => vec![mean, std],
        };
        mats.iter().all(|m| (1..m.rows()).all(|r| m.row(r) == m.row(0)))
    }
}

/// Actions for a batch. TanhNormal keeps the pre-squash sample `u` so that
/// log-probabilities can be recomputed without inverting `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionBatch {
    Discrete(Vec<usize>),
    Continuous { u: Matrix, action: Matrix },
}

impl ActionBatch {
    pub fn len(&self) -> usize {
        match self {
            ActionBatch::Discrete(a) => a.len(),
            ActionBatch::Continuous { u, .. } => u.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        match self {
            ActionBatch::Discrete(a) => ActionBatch::Discrete(idx.iter().map(|&i| a[i]).collect()),
            ActionBatch::Continuous { u, action } => ActionBatch::Continuous {
                u: u.select_rows(idx),
                action: action.select_rows(idx),
            },
        }
    }

    /// The environment action for row `i`.
    pub fn env_action(&self, i: usize) -> crate::envs::Action {
        match self {
            ActionBatch::Discrete(a) => crate::envs::Action::Discrete(a[i]),
            ActionBatch::Continuous { action, .. } => crate::envs::Action::Continuous(action.row(i).to_vec()),
        }
    }

    pub fn concat(parts: &[ActionBatch]) -> Result<Self> {
        match parts.first() {
            Some(ActionBatch::Discrete(_)) => {
                let mut all = Vec::new();
                for p in parts {
                    match p {
                        ActionBatch::Discrete(a) => all.extend_from_slice(a),
                        _ => return Err(shape_err("ActionBatch::concat", "mixed kinds")),
                    }
                }
                Ok(ActionBatch::Discrete(all))
            }
            Some(ActionBatch::Continuous { .. }) => {
                let (mut us, mut acts) = (Vec::new(), Vec::new());
                for p in parts {
                    match p {
                        ActionBatch::Continuous { u, action } => {
                            us.push(u.clone());
                            acts.push(action.clone());
                        }
                        _ => return Err(shape_err("ActionBatch::concat", "mixed kinds")),
                    }
                }
                Ok(ActionBatch::Continuous {
                    u: Matrix::vstack(&us)?,
                    action: Matrix::vstack(&acts)?,
                })
            }
            None => Err(Error::Empty("ActionBatch::concat")),
        }
    }
}

/// `N x 1` log-probability node of `actions` under the head's distribution.
pub fn log_prob_node(g: &mut Graph, head: &HeadNodes, actions: &ActionBatch) -> Result<Var> {
    match (head, actions) {
        (HeadNodes::Logits(logits), ActionBatch::Discrete(a)) => {
            let lp = g.log_softmax(*logits);
            g.gather(lp, a)
        }
        (HeadNodes::TanhNormal { mean, std }, ActionBatch::Continuous { u, .. }) => {
            let correction: Vec<f64> = (0..u.rows()).map(|r| tanh_log_det(u.row(r))).collect();
            let u = g.constant(u.clone());
            let diff = g.sub(u, *mean)?;
            let z = g.div(diff, *std)?;
            let z2 = g.square(z);
            let quad = g.scale(z2, -0.5);
            let log_std = g.log(*std);
            let terms = g.sub(quad, log_std)?;
            let terms = g.offset(terms, -HALF_LN_TWO_PI);
            let normal = g.row_sum(terms);
            let corr = g.constant(Matrix::column_vector(&correction));
            g.sub(normal, corr)
        }
        _ => Err(shape_err("log_prob_node", "action kind does not match the head")),
    }
}

/// `Σ_k log(1 − tanh(u_k)² + ε)`.
fn tanh_log_det(u: &[f64]) -> f64 {
    u.iter()
        .map(|&x| {
            let t = x.tanh();
            (1.0 - t * t + TANH_EPS).ln()
        })
        .sum()
}

/// Row entropies of a categorical distribution, `−Σ p log p`.
pub fn categorical_entropy(logits: &Matrix) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let lse = log_sum_exp(row);
            -row
                .iter()
                .map(|&l| {
                    let lp = l - lse;
                    let p = lp.exp();
                    if p == 0.0 {
                        0.0
                    } else {
                        p * lp
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

/// Samples one action per row, returning `(actions, log_probs, entropies)`.
pub fn categorical_sample_logprob_entropy<R: Rng + ?Sized>(
    logits: &Matrix,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("categorical logits"));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let lp = g.log_softmax(l);
    let lpv = g.value(lp).clone();
    let mut actions = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let u: f64 = rng.random();
        let row = lpv.row(r);
        let mut acc = 0.0;
        let mut chosen = row.len() - 1;
        for (a, &x) in row.iter().enumerate() {
            acc += x.exp();
            if u < acc {
                chosen = a;
                break;
            }
        }
        actions.push(chosen);
    }
    let picked = g.gather(lp, &actions)?;
    let log_probs = g.value(picked).data().to_vec();
    Ok((actions, log_probs, categorical_entropy(logits)))
}

/// Samples `u ~ Normal(mean, std)` and squashes it with `tanh`.
pub fn tanhnormal_sample_logprob<R: Rng + ?Sized>(
    mean: &Matrix,
    std: &Matrix,
    rng: &mut R,
) -> Result<(ActionBatch, Vec<f64>)> {
    if mean.shape() != std.shape() {
        return Err(shape_err("tanhnormal_sample_logprob", "mean/std shapes differ"));
    }
    if std.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("TanhNormal std must be positive".into()));
    }
    let mut u = mean.clone();
    for (x, &s) in u.data_mut().iter_mut().zip(std.data()) {
        let eps: f64 = rng.sample(StandardNormal);
        *x += s * eps;
    }
    let action = u.map(f64::tanh);
    let actions = ActionBatch::Continuous { u, action };
    let lp = tanhnormal_log_prob(mean, std, &actions)?;
    Ok((actions, lp))
}

/// Log-probabilities of stored TanhNormal actions.
pub fn tanhnormal_log_prob(mean: &Matrix, std: &Matrix, actions: &ActionBatch) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let m = g.constant(mean.clone());
    let s = g.constant(std.clone());
    let node = log_prob_node(&mut g, &HeadNodes::TanhNormal { mean: m, std: s }, actions)?;
    Ok(g.value(node).data().to_vec())
}

/// Samples one action per row of `dist`, returning the actions and their
/// log-probabilities.
pub fn sample_actions<R: Rng + ?Sized>(dist: &DistParams, rng: &mut R) -> Result<(ActionBatch, Vec<f64>)> {
    match dist {
        DistParams::Categorical { logits } => {
            let (a, lp, _) = categorical_sample_logprob_entropy(logits, rng)?;
            Ok((ActionBatch::Discrete(a), lp))
        }
        DistParams::TanhNormal { mean, std } => tanhnormal_sample_logprob(mean, std, rng),
    }
}
