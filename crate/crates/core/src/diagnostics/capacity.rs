//! Capacity loss: how well a checkpoint can still fit the outputs of a fresh
//! random network of the same architecture, on that network's own rollout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterSet, Var};
use crate::envs::{apply_normalizer, Env, EnvConfig, Normalizer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::networks::{actor_forward, critic_forward, sample_actions, Agent, DistParams, HeadNodes, NetworkParams};
use crate::optim::{adam_step, clip_grad_norm, global_norm, AdamConfig, AdamState};
use crate::rng::{RngStreams, StreamRng};

/// Minibatch gradients at or below this global norm are treated as
/// stationary and skipped. Adam rescales any nonzero gradient to a step of
/// roughly `lr`, which would otherwise turn round-off at an exact fit into
/// a real move away from it.
pub const STATIONARY_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityBudget {
    pub epochs: usize,
    pub minibatch_size: usize,
    pub adam: AdamConfig,
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityHead {
    Actor,
    Critic,
}

/// A frozen fitting task: a random target agent, observations from its own
/// rollout, and its outputs on them.
#[derive(Debug, Clone)]
pub struct CapacityProbe {
    pub target: Agent,
    pub observations: Matrix,
    pub target_dist: DistParams,
    pub target_values: Vec<f64>,
    pub budget: CapacityBudget,
    pub seed: u64,
}

impl CapacityProbe {
    /// Rolls out `target`'s actor for `dataset_size` steps in a fresh
    /// environment and records the target outputs. Observations are
    /// normalized with `normalizer` when given.
    pub fn collect(
        target: Agent,
        env_cfg: &EnvConfig,
        normalizer: Option<&Normalizer>,
        dataset_size: usize,
        budget: CapacityBudget,
        seed: u64,
    ) -> Result<Self> {
        if dataset_size < 2 {
            return Err(Error::Config("capacity dataset needs at least 2 observations".into()));
        }
        let streams = RngStreams::new(seed);
        let mut env_rng = streams.stream("capacity_env", 0);
        let mut act_rng = streams.stream("capacity_policy", 0);
        let mut env = Env::new(env_cfg)?;
        let prep = |o: Vec<f64>| -> Result<Vec<f64>> {
            match normalizer {
                Some(n) => apply_normalizer(n, &o),
                None => Ok(o),
            }
        };
        let mut obs = prep(env.reset(rand::Rng::random(&mut env_rng)))?;
        let mut rows = Vec::with_capacity(dataset_size);
        while rows.len() < dataset_size {
            let (dist, _) = actor_forward(&target.actor, &Matrix::row_vector(&obs))?;
            let (actions, _) = sample_actions(&dist, &mut act_rng)?;
            let step = env.step(&actions.env_action(0))?;
            rows.push(obs);
            obs = if step.terminated || step.truncated {
                prep(env.reset(rand::Rng::random(&mut env_rng)))?
            } else {
                prep(step.observation)?
            };
        }
        let observations = Matrix::from_rows(&rows)?;
        Self::from_observations(target, observations, budget, seed)
    }

    pub fn from_observations(target: Agent, observations: Matrix, budget: CapacityBudget, seed: u64) -> Result<Self> {
        if budget.minibatch_size == 0 {
            return Err(Error::Config("capacity minibatch_size must be positive".into()));
        }
        let (target_dist, _) = actor_forward(&target.actor, &observations)?;
        let (target_values, _) = critic_forward(&target.critic_standalone(), &observations)?;
        Ok(Self {
            target,
            observations,
            target_dist,
            target_values,
            budget,
            seed,
        })
    }

    fn target_network(&self, head: CapacityHead) -> NetworkParams {
        match head {
            CapacityHead::Actor => self.target.actor.clone(),
            CapacityHead::Critic => self.target.critic_standalone(),
        }
    }
}

/// Mean fitting loss of `net` against the probe targets on rows `idx`.
/// Critic: squared error. Actor: forward KL(target ‖ net); for TanhNormal
/// heads the KL between the underlying Normals.
fn fit_loss(g: &mut Graph, net: &NetworkParams, params: Option<&mut ParameterSet>, probe: &CapacityProbe, idx: &[usize], head: CapacityHead) -> Result<Var> {
    let bound = match params {
        Some(set) => net.bind_trainable(g, set, "fit")?,
        None => net.bind_constant(g)?,
    };
    let x = g.constant(probe.observations.select_rows(idx));
    let (nodes, _) = net.forward_nodes(g, x, &bound)?;
    match (head, nodes, probe.target_dist.select_rows(idx)) {
        (CapacityHead::Critic, HeadNodes::Value(v), _) => {
            let t: Vec<f64> = idx.iter().map(|&i| probe.target_values[i]).collect();
            let t = g.constant(Matrix::column_vector(&t));
            let d = g.sub(v, t)?;
            let sq = g.square(d);
            g.mean(sq)
        }
        (CapacityHead::Actor, HeadNodes::Logits(l), DistParams::Categorical { logits }) => {
            let mut p = logits.clone();
            let mut neg_entropy = 0.0;
            for r in 0..p.rows() {
                let lse = crate::autodiff::log_sum_exp(logits.row(r));
                for v in p.row_mut(r) {
                    let lp = *v - lse;
                    *v = lp.exp();
                    if *v > 0.0 {
                        neg_entropy += *v * lp;
                    }
                }
            }
            let lq = g.log_softmax(l);
            let pt = g.constant(p);
            let cross = g.mul(pt, lq)?;
            let cross = g.row_sum(cross);
            let mean_cross = g.mean(cross)?;
            let kl = g.scale(mean_cross, -1.0);
            Ok(g.offset(kl, neg_entropy / idx.len() as f64))
        }
        (CapacityHead::Actor, HeadNodes::TanhNormal { mean, std }, DistParams::TanhNormal { mean: mt, std: st }) => {
            let ln_st = g.constant(st.map(f64::ln));
            let st2 = g.constant(st.map(|s| s * s));
            let mt = g.constant(mt);
            let diff = g.sub(mean, mt)?;
            let diff2 = g.square(diff);
            let num = g.add(diff2, st2)?;
            let var = g.square(std);
            let den = g.scale(var, 2.0);
            let frac = g.div(num, den)?;
            let ln_s = g.log(std);
            let t = g.add(ln_s, frac)?;
            let t = g.sub(t, ln_st)?;
            let t = g.offset(t, -0.5);
            let per_row = g.row_sum(t);
            g.mean(per_row)
        }
        _ => Err(Error::Config("capacity head does not match the network".into())),
    }
}

/// Loss of `net` on the whole probe dataset.
pub fn probe_loss(net: &NetworkParams, probe: &CapacityProbe, head: CapacityHead) -> Result<f64> {
    let idx: Vec<usize> = (0..probe.observations.rows()).collect();
    let mut g = Graph::new();
    let loss = fit_loss(&mut g, net, None, probe, &idx, head)?;
    Ok(g.value(loss).get(0, 0))
}

/// Fits a copy of the checkpoint's `head` network to the probe with a fresh
/// optimizer and returns the final loss on the full dataset.
pub fn capacity_loss(checkpoint: &Agent, probe: &CapacityProbe, head: CapacityHead) -> Result<f64> {
    let target = probe.target_network(head);
    let mut net = match head {
        CapacityHead::Actor => checkpoint.actor.clone(),
        CapacityHead::Critic => checkpoint.critic_standalone(),
    };
    if net.spec != target.spec {
        return Err(Error::Config("checkpoint and capacity target architectures differ".into()));
    }
    let n = probe.observations.rows();
    let m = probe.budget.minibatch_size.min(n);
    let mut flat = net.flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = StreamRng::seed_from_u64(probe.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..probe.budget.epochs {
        order.shuffle(&mut rng);
        for mb in order.chunks_exact(m) {
            let mut g = Graph::new();
            let mut set = ParameterSet::new();
            let loss = fit_loss(&mut g, &net, Some(&mut set), probe, mb, head)?;
            if !g.value(loss).all_finite() {
                return Err(Error::NonFinite("capacity fit loss"));
            }
            g.backward(loss)?;
            let mut grad = set.flat_gradient(&g);
            if let Some(max) = probe.budget.max_grad_norm {
                clip_grad_norm(&mut grad, max)?;
            }
            if global_norm(&grad) <= STATIONARY_GRAD_NORM {
                continue;
            }
            adam_step(&mut flat, &grad, &mut state, &probe.budget.adam)?;
            net.set_flat(&flat)?;
        }
    }
    probe_loss(&net, probe, head)
}
