//! Two-state, two-action model of PPO updates on a collapsed representation.
//!
//! Each state `s` has a fixed scalar feature `φ(s)` with `φ(y) = α·φ(x)`.
//! The last layer `θ = (θ₁, θ₂)` produces logits `θᵢ·φ(s)`, so
//! `π(a₁|s) = σ((θ₁ − θ₂)·φ(s))`. A single-sample clipped-surrogate SGD
//! step on `(s, a₁)` with positive advantage moves `θ₁` up and `θ₂` down by
//!
//! ```text
//! δ_s = η · (A_s / π_old(a₁|s)) · φ(s) · p(1 − p),    p = π(a₁|s)
//! ```
//!
//! unless the ratio `π(a₁|s) / π_old(a₁|s)` already reached `1 + ε`.

use std::io::Write;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyState {
    X,
    Y,
}

impl ToyState {
    pub fn label(self) -> &'static str {
        match self {
            ToyState::X => "x",
            ToyState::Y => "y",
        }
    }
}

/// Order of single-sample updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToySchedule {
    /// `epochs` passes over the two-sample batch `[x, y]` with minibatch
    /// size 1: x, y, x, y, … (`2 · epochs` updates).
    Interleaved,
    /// `steps` visits alternating x, y, …, each made of `epochs`
    /// consecutive updates on the visited state.
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Fixed `φ(x)`; drawn from a standard normal with `phi_seed` if absent.
    pub phi_x: Option<f64>,
    pub phi_seed: u64,
    pub alpha: f64,
    pub adv_x: f64,
    pub adv_y: f64,
    pub pi_old_x: f64,
    pub pi_old_y: f64,
    pub eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub steps: usize,
    pub schedule: ToySchedule,
    /// Set `π_old ← π_θ` at the start of every visit to a state.
    pub refresh_pi_old: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            phi_x: None,
            phi_seed: 0,
            alpha: 3.0,
            adv_x: 1.0,
            adv_y: 1.0,
            pi_old_x: 0.5,
            pi_old_y: 0.5,
            eps: 0.1,
            lr: 1.5,
            epochs: 10,
            steps: 20,
            schedule: ToySchedule::Interleaved,
            refresh_pi_old: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adv_x > 0.0 && self.adv_y > 0.0) {
            return Err(Error::Config("toy advantages must be positive".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config("toy eps must lie in (0, 1)".into()));
        }
        for p in [self.pi_old_x, self.pi_old_y] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config("toy pi_old values must lie in (0, 1)".into()));
            }
        }
        if !self.alpha.is_finite() || !self.lr.is_finite() {
            return Err(Error::Config("toy alpha and lr must be finite".into()));
        }
        Ok(())
    }

    /// `φ(x)`: the fixed value, or one standard-normal draw.
    pub fn phi_x(&self) -> f64 {
        self.phi_x.unwrap_or_else(|| {
            let mut rng = StreamRng::seed_from_u64(self.phi_seed);
            StandardNormal.sample(&mut rng)
        })
    }

    pub fn phi(&self, s: ToyState) -> f64 {
        match s {
            ToyState::X => self.phi_x(),
            ToyState::Y => self.alpha * self.phi_x(),
        }
    }

    fn advantage(&self, s: ToyState) -> f64 {
        match s {
            ToyState::X => self.adv_x,
            ToyState::Y => self.adv_y,
        }
    }

    fn schedule(&self) -> Vec<ToyState> {
        match self.schedule {
            ToySchedule::Interleaved => (0..self.epochs).flat_map(|_| [ToyState::X, ToyState::Y]).collect(),
            ToySchedule::Blocked => (0..self.steps)
                .flat_map(|v| {
                    let s = if v % 2 == 0 { ToyState::X } else { ToyState::Y };
                    std::iter::repeat_n(s, self.epochs)
                })
                .collect(),
        }
    }
}

/// `π(a₁|s)` for features `phi`.
pub fn toy_prob(theta: [f64; 2], phi: f64) -> f64 {
    sigmoid((theta[0] - theta[1]) * phi)
}

/// The increment `δ_s` before gating.
pub fn toy_delta(theta: [f64; 2], phi: f64, advantage: f64, pi_old: f64, lr: f64) -> f64 {
    let (a, b) = ((theta[0] * phi).exp(), (theta[1] * phi).exp());
    lr * (advantage / pi_old) * phi * a * b / ((a + b) * (a + b))
}

/// One gated update on state `s`. Returns the new θ and whether it moved.
pub fn toy_step(theta: [f64; 2], s: ToyState, pi_old: f64, cfg: &ToyConfig) -> ([f64; 2], bool) {
    let phi = cfg.phi(s);
    if toy_prob(theta, phi) / pi_old >= 1.0 + cfg.eps {
        return (theta, false);
    }
    let d = toy_delta(theta, phi, cfg.advantage(s), pi_old, cfg.lr);
    ([theta[0] + d, theta[1] - d], true)
}

/// The same update taken by the generic machinery: logits `φ(s)·[θ₁, θ₂]`,
/// log-softmax, ratio against `π_old`, clipped surrogate, then one SGD step
/// of size `lr` on its negation.
pub fn toy_autodiff_step(theta: [f64; 2], s: ToyState, pi_old: f64, cfg: &ToyConfig) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let x = g.constant(Matrix::scalar(cfg.phi(s)));
    let w = g.parameter(Matrix::row_vector(&theta));
    let b = g.constant(Matrix::zeros(1, 2));
    let logits = g.linear(x, w, b)?;
    let lp = g.log_softmax(logits);
    let lp = g.gather(lp, &[0])?;
    let log_ratio = g.offset(lp, -pi_old.ln());
    let ratio = g.exp(log_ratio);
    let surrogate = g.clipped_surrogate(ratio, &[cfg.advantage(s)], cfg.eps)?;
    let objective = g.mean(surrogate)?;
    let loss = g.scale(objective, -1.0);
    g.backward(loss)?;
    let grad = g.grad_or_zeros(w);
    Ok([theta[0] - cfg.lr * grad.get(0, 0), theta[1] - cfg.lr * grad.get(0, 1)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyUpdate {
    pub index: usize,
    pub state: ToyState,
    pub applied: bool,
    pub theta1: f64,
    pub theta2: f64,
    pub p_x: f64,
    pub p_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrace {
    pub initial_p_x: f64,
    pub initial_p_y: f64,
    pub updates: Vec<ToyUpdate>,
}

pub fn toy_simulate(cfg: &ToyConfig) -> Result<ToyTrace> {
    cfg.validate()?;
    let (phi_x, phi_y) = (cfg.phi(ToyState::X), cfg.phi(ToyState::Y));
    let mut theta = [0.0, 0.0];
    let mut pi_old = [cfg.pi_old_x, cfg.pi_old_y];
    let mut updates = Vec::new();
    let mut prev: Option<ToyState> = None;
    for (index, s) in cfg.schedule().into_iter().enumerate() {
        let k = s as usize;
        if cfg.refresh_pi_old && prev != Some(s) {
            pi_old[k] = toy_prob(theta, cfg.phi(s));
        }
        prev = Some(s);
        let (next, applied) = toy_step(theta, s, pi_old[k], cfg);
        theta = next;
        updates.push(ToyUpdate {
            index,
            state: s,
            applied,
            theta1: theta[0],
            theta2: theta[1],
            p_x: toy_prob(theta, phi_x),
            p_y: toy_prob(theta, phi_y),
        });
    }
    Ok(ToyTrace {
        initial_p_x: toy_prob([0.0, 0.0], phi_x),
        initial_p_y: toy_prob([0.0, 0.0], phi_y),
        updates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClaims {
    /// Every update changed both probabilities in the direction the sign of
    /// α dictates.
    pub signs_hold: bool,
    /// Indices of updates that broke the sign rule.
    pub violations: Vec<usize>,
    /// Both probabilities never decreased.
    pub both_non_decreasing: bool,
    /// Some probability rose further while its own gate was already closed.
    pub pushed_past_clip: bool,
    /// Some probability ever exceeded `π_old·(1+ε)`.
    pub exceeded_clip: bool,
    /// The smaller final probability is below its initial value.
    pub ended_below_initial: bool,
}

/// Checks each update against the sign analysis: for `α ≥ 0` both
/// probabilities are non-decreasing under either update; for `α ≤ 0` the
/// updated state's probability is non-decreasing and the other one
/// non-increasing.
pub fn toy_verify_claims(trace: &ToyTrace, cfg: &ToyConfig) -> ToyClaims {
    let limit = [cfg.pi_old_x * (1.0 + cfg.eps), cfg.pi_old_y * (1.0 + cfg.eps)];
    let mut violations = Vec::new();
    let mut both_non_decreasing = true;
    let mut pushed_past_clip = false;
    let mut exceeded_clip = false;
    let (mut px, mut py) = (trace.initial_p_x, trace.initial_p_y);
    for u in &trace.updates {
        let (dx, dy) = (u.p_x - px, u.p_y - py);
        let (own, other) = match u.state {
            ToyState::X => (dx, dy),
            ToyState::Y => (dy, dx),
        };
        let ok_pos = own >= 0.0 && other >= 0.0;
        let ok_neg = own >= 0.0 && other <= 0.0;
        let ok = match cfg.alpha {
            a if a > 0.0 => ok_pos,
            a if a < 0.0 => ok_neg,
            _ => ok_pos && ok_neg,
        };
        if !ok {
            violations.push(u.index);
        }
        if dx < 0.0 || dy < 0.0 {
            both_non_decreasing = false;
        }
        let (other_prev, other_gain, other_limit) = match u.state {
            ToyState::X => (py, dy, limit[1]),
            ToyState::Y => (px, dx, limit[0]),
        };
        if other_prev >= other_limit && other_gain > 0.0 {
            pushed_past_clip = true;
        }
        if u.p_x > limit[0] || u.p_y > limit[1] {
            exceeded_clip = true;
        }
        (px, py) = (u.p_x, u.p_y);
    }
    let ended_below_initial = trace
        .updates
        .last()
        .is_some_and(|u| u.p_x < trace.initial_p_x || u.p_y < trace.initial_p_y);
    ToyClaims {
        signs_hold: violations.is_empty(),
        violations,
        both_non_decreasing,
        pushed_past_clip,
        exceeded_clip,
        ended_below_initial,
    }
}

/// Writes `update_index,state,theta1,theta2,p_x,p_y`, one row per update.
pub fn write_trace_csv<W: Write>(trace: &ToyTrace, mut w: W) -> Result<()> {
    writeln!(w, "update_index,state,theta1,theta2,p_x,p_y")?;
    for u in &trace.updates {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            u.index,
            u.state.label(),
            u.theta1,
            u.theta2,
            u.p_x,
            u.p_y
        )?;
    }
    Ok(())
}
