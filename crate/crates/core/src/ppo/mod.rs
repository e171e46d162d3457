//! PPO-Clip training: rollout collection, the composite loss and the outer
//! loop.
//!
//! The loss minimized on each minibatch is
//!
//! ```text
//! −L_clip + c_pfo · L_pfo − c_H · H + c_vf · L_vf
//! ```
//!
//! where `L_clip` is the clipped surrogate on per-minibatch normalized
//! advantages, `L_pfo` the squared distance between current and rollout-time
//! actor pre-activations, `H` the policy entropy and `L_vf` the value MSE.

mod rollout;
mod train;

pub use rollout::{collect_rollout, Collector, RolloutBatch};
pub use train::{
    batch_ratios, capacity_ticks, diagnostics_ticks, run_capacity_probe, run_normalizer, train, DiagnosticsConfig,
    NetworkConfig, TrainConfig, TrainEvent, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::advantage::{normalize_advantages, GaeConfig};
use crate::autodiff::{Graph, ParameterSet, Var};
use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::networks::{log_prob_node, Agent, HeadNodes};
use crate::optim::AdamConfig;

/// Which actor pre-activations the feature penalty anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfoScope {
    Off,
    /// Penultimate layer only.
    Last,
    /// Every hidden layer up to and including the penultimate one.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    /// Clip range ε; ratios are clipped to `[1−ε, 1+ε]`.
    pub clip_eps: f64,
    /// Optimization epochs K per rollout.
    pub epochs: usize,
    /// Minibatch size M. A final partial minibatch is dropped.
    pub minibatch_size: usize,
    pub entropy_coeff: f64,
    pub value_coeff: f64,
    pub pfo_coeff: f64,
    pub pfo_scope: PfoScope,
    pub adam: AdamConfig,
    pub max_grad_norm: f64,
    /// Zero Adam's moments and step count at every new rollout.
    pub adam_reset_each_batch: bool,
    pub gae: GaeConfig,
}

impl PpoConfig {
    pub fn discrete_defaults() -> Self {
        Self {
            clip_eps: 0.1,
            epochs: 4,
            minibatch_size: 256,
            entropy_coeff: 0.01,
            value_coeff: 0.5,
            pfo_coeff: 1.0,
            pfo_scope: PfoScope::Off,
            adam: AdamConfig::default(),
            max_grad_norm: 0.5,
            adam_reset_each_batch: false,
            gae: GaeConfig::default(),
        }
    }

    pub fn continuous_defaults() -> Self {
        Self {
            clip_eps: 0.2,
            epochs: 10,
            minibatch_size: 64,
            entropy_coeff: 0.0,
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            ..Self::discrete_defaults()
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("ppo.clip_eps must lie in (0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("ppo.epochs must be at least 1".into()));
        }
        if self.minibatch_size < 2 {
            return Err(Error::Config("ppo.minibatch_size must be at least 2".into()));
        }
        if self.minibatch_size > batch_size {
            return Err(Error::Config(format!(
                "ppo.minibatch_size ({}) exceeds the batch size n_envs * steps_per_env ({batch_size})",
                self.minibatch_size
            )));
        }
        for (name, v) in [
            ("ppo.entropy_coeff", self.entropy_coeff),
            ("ppo.value_coeff", self.value_coeff),
            ("ppo.pfo_coeff", self.pfo_coeff),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("ppo.max_grad_norm must be positive".into()));
        }
        self.adam.validate()?;
        self.gae.validate()
    }
}

/// Ratio `exp(new − old)` as an `N x 1` node.
pub fn ratio_node(g: &mut Graph, new_log_probs: Var, old_log_probs: &[f64]) -> Result<Var> {
    let old = g.constant(Matrix::column_vector(old_log_probs));
    let diff = g.sub(new_log_probs, old)?;
    Ok(g.exp(diff))
}

/// Mean clipped surrogate `min(ρΨ, clip(ρ, 1−ε, 1+ε)Ψ)` (to maximize).
pub fn ppo_clip_objective(
    g: &mut Graph,
    new_log_probs: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<Var> {
    let ratio = ratio_node(g, new_log_probs, old_log_probs)?;
    let surr = g.clipped_surrogate(ratio, advantages, eps)?;
    g.mean(surr)
}

/// Indices of the hidden layers a scope anchors, out of `n_layers`.
pub fn pfo_layers(scope: PfoScope, n_layers: usize) -> Result<Vec<usize>> {
    match scope {
        PfoScope::Off => Err(Error::Config("pfo_penalty called with scope `off`".into())),
        _ if n_layers == 0 => Err(shape_err("pfo_penalty", "network has no hidden layers")),
        PfoScope::Last => Ok(vec![n_layers - 1]),
        PfoScope::All => Ok((0..n_layers).collect()),
    }
}

/// Mean over samples of `Σ_layers ‖z − z_old‖²`, for the layers in `scope`.
///
/// `preacts` and `old_preacts` hold every hidden layer, first to
/// penultimate.
pub fn pfo_penalty(g: &mut Graph, preacts: &[Var], old_preacts: &[Matrix], scope: PfoScope) -> Result<Var> {
    if preacts.len() != old_preacts.len() {
        return Err(shape_err(
            "pfo_penalty",
            format!("{} probed layers vs {} stored", preacts.len(), old_preacts.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for l in pfo_layers(scope, preacts.len())? {
        if g.value(preacts[l]).shape() != old_preacts[l].shape() {
            return Err(shape_err("pfo_penalty", format!("layer {l} shape mismatch")));
        }
        let old = g.constant(old_preacts[l].clone());
        let d = g.sub(preacts[l], old)?;
        let sq = g.square(d);
        let per_sample = g.row_sum(sq);
        let m = g.mean(per_sample)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| shape_err("pfo_penalty", "no layers in scope"))
}

/// Mean policy entropy node. Categorical: exact. TanhNormal: the
/// single-sample estimate `−mean(log π(a|s))` of the stored actions.
pub fn entropy_node(g: &mut Graph, head: &HeadNodes, log_probs: Var) -> Result<Var> {
    match *head {
        HeadNodes::Logits(l) => {
            let lp = g.log_softmax(l);
            let p = g.exp(lp);
            let plp = g.mul(p, lp)?;
            let per_row = g.row_sum(plp);
            let m = g.mean(per_row)?;
            Ok(g.scale(m, -1.0))
        }
        HeadNodes::TanhNormal { .. } => {
            let m = g.mean(log_probs)?;
            Ok(g.scale(m, -1.0))
        }
        HeadNodes::Value(_) => Err(Error::Config("entropy of a value head".into())),
    }
}

/// Graph nodes of every loss term for one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub clip_objective: Var,
    pub value_loss: Var,
    pub entropy: Var,
    pub pfo: Option<Var>,
    pub new_log_probs: Var,
}

/// Builds the composite loss for rows `idx` of `batch`, binding the agent's
/// parameters as trainable leaves in `params` (in [`Agent::flat`] order).
pub fn total_loss(
    g: &mut Graph,
    params: &mut ParameterSet,
    agent: &Agent,
    batch: &RolloutBatch,
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<LossNodes> {
    let bound = agent.bind_trainable(g, params)?;
    let x = g.constant(batch.observations.select_rows(idx));
    let (head, trunk) = agent.actor_nodes(g, x, &bound)?;
    let new_lp = log_prob_node(g, &head, &batch.actions.select_rows(idx))?;
    let old_lp: Vec<f64> = idx.iter().map(|&i| batch.old_log_probs[i]).collect();
    let adv: Vec<f64> = idx.iter().map(|&i| batch.advantages[i]).collect();
    let adv = normalize_advantages(&adv)?;
    let clip_objective = ppo_clip_objective(g, new_lp, &old_lp, &adv, cfg.clip_eps)?;

    let entropy = entropy_node(g, &head, new_lp)?;

    let (v, _) = agent.critic_nodes(g, x, &bound, Some(&trunk))?;
    let ret: Vec<f64> = idx.iter().map(|&i| batch.returns[i]).collect();
    let ret = g.constant(Matrix::column_vector(&ret));
    let err = g.sub(v, ret)?;
    let sq = g.square(err);
    let value_loss = g.mean(sq)?;

    let pfo = match cfg.pfo_scope {
        PfoScope::Off => None,
        scope => {
            let old: Vec<Matrix> = batch.old_preacts.iter().map(|m| m.select_rows(idx)).collect();
            Some(pfo_penalty(g, &trunk.preacts, &old, scope)?)
        }
    };

    let mut total = g.scale(clip_objective, -1.0);
    if let Some(p) = pfo {
        let t = g.scale(p, cfg.pfo_coeff);
        total = g.add(total, t)?;
    }
    let h = g.scale(entropy, -cfg.entropy_coeff);
    total = g.add(total, h)?;
    let vf = g.scale(value_loss, cfg.value_coeff);
    total = g.add(total, vf)?;
    Ok(LossNodes {
        total,
        clip_objective,
        value_loss,
        entropy,
        pfo,
        new_log_probs: new_lp,
    })
}
