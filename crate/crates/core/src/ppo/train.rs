use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::rollout::{policy_snapshot, Collector, RolloutBatch};
use super::{total_loss, PpoConfig};
use crate::autodiff::{Activation, Graph, ParameterSet};
use crate::diagnostics::{
    capacity_loss, policy_variance_across_states, ratio_stats, representation_stats, CapacityBudget, CapacityHead,
    CapacityProbe, DiagnosticsRecord, LossStats, RepresentationStats, FEATURE_RANK_DELTA, RANK_DELTA,
};
use crate::envs::{fit_obs_normalizer, uniform_rollout, ActionSpace, Env, EnvConfig, EnvKind, Normalizer};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::networks::{categorical_entropy, Agent, DistParams, HeadKind, MlpSpec};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::rng::RngStreams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub shared_trunk: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64],
            activation: Activation::Relu,
            shared_trunk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Record cadence as a fraction of all batches (at least every batch).
    pub fraction: f64,
    /// Capacity cadence as a fraction of training progress; 0 disables.
    pub capacity_fraction: f64,
    pub capacity_dataset_size: usize,
    /// Passes over the probe dataset per fit.
    pub capacity_epochs: usize,
    pub rank_delta: f64,
    pub feature_rank_delta: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            fraction: 0.001,
            capacity_fraction: 0.025,
            capacity_dataset_size: 1024,
            capacity_epochs: 32,
            rank_delta: RANK_DELTA,
            feature_rank_delta: FEATURE_RANK_DELTA,
        }
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub ppo: PpoConfig,
    pub diagnostics: DiagnosticsConfig,
    pub total_steps: u64,
    pub n_envs: usize,
    pub steps_per_env: usize,
    /// Standardize observations with statistics from a uniform-policy
    /// rollout, frozen for the whole run.
    pub normalize_observations: bool,
    pub normalizer_min_episodes: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl TrainConfig {
    pub fn defaults(kind: EnvKind) -> Self {
        let discrete = kind.is_discrete();
        Self {
            env: EnvConfig::defaults(kind),
            network: NetworkConfig {
                activation: if discrete { Activation::Relu } else { Activation::Tanh },
                ..NetworkConfig::default()
            },
            ppo: if discrete {
                PpoConfig::discrete_defaults()
            } else {
                PpoConfig::continuous_defaults()
            },
            diagnostics: DiagnosticsConfig {
                capacity_epochs: if discrete { 32 } else { 16 },
                ..DiagnosticsConfig::default()
            },
            total_steps: if discrete { 200_000 } else { 300_000 },
            n_envs: 8,
            steps_per_env: 128,
            normalize_observations: !discrete,
            normalizer_min_episodes: 4,
            seed: 0,
            execution: Execution::default(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.steps_per_env
    }

    /// Number of rollouts; at least one.
    pub fn n_batches(&self) -> u64 {
        (self.total_steps / self.batch_size().max(1) as u64).max(1)
    }

    pub fn actor_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: Env::obs_dim_for(self.env.kind),
            hidden_widths: self.network.hidden_widths.clone(),
            activation: self.network.activation,
            head: match Env::action_space_for(self.env.kind) {
                ActionSpace::Discrete(n) => HeadKind::Categorical { n_actions: n },
                ActionSpace::Continuous(d) => HeadKind::TanhNormal { action_dim: d },
            },
        }
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec {
            head: HeadKind::Value,
            ..self.actor_spec()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.n_envs == 0 || self.steps_per_env == 0 {
            return Err(Error::Config("n_envs and steps_per_env must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        self.ppo.validate(self.batch_size())?;
        self.actor_spec().validate()?;
        let width = self.actor_spec().penultimate_width();
        if self.batch_size() <= width {
            return Err(Error::Config(format!(
                "the batch size n_envs * steps_per_env ({}) must exceed the penultimate width ({width}) for rank diagnostics",
                self.batch_size()
            )));
        }
        let d = &self.diagnostics;
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            return Err(Error::Config("diagnostics.fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&d.capacity_fraction) {
            return Err(Error::Config("diagnostics.capacity_fraction must lie in [0, 1]".into()));
        }
        if d.capacity_fraction > 0.0 && (d.capacity_dataset_size < 2 || d.capacity_epochs == 0) {
            return Err(Error::Config(
                "diagnostics.capacity_dataset_size must be ≥ 2 and diagnostics.capacity_epochs ≥ 1".into(),
            ));
        }
        if self.network.shared_trunk && self.network.hidden_widths.is_empty() {
            return Err(Error::Config("network.shared_trunk needs hidden layers".into()));
        }
        Ok(())
    }
}

/// Batches after which a record is written: every
/// `max(1, round(fraction · n_batches))`-th batch from the first, plus the
/// last.
pub fn diagnostics_ticks(n_batches: u64, fraction: f64) -> BTreeSet<u64> {
    let every = ((fraction * n_batches as f64).round() as u64).max(1);
    let mut ticks: BTreeSet<u64> = (0..n_batches).step_by(every as usize).collect();
    if n_batches > 0 {
        ticks.insert(n_batches - 1);
    }
    ticks
}

/// Batches at training progress `0, f, 2f, …, 1`, rounded to the nearest
/// batch. `fraction = 0.025` gives 41 ticks when there are enough batches.
pub fn capacity_ticks(n_batches: u64, fraction: f64) -> BTreeSet<u64> {
    if fraction <= 0.0 || n_batches == 0 {
        return BTreeSet::new();
    }
    let k_max = (1.0 / fraction).round() as u64;
    (0..=k_max)
        .map(|k| ((k as f64 * fraction).min(1.0) * (n_batches - 1) as f64).round() as u64)
        .collect()
}

pub enum TrainEvent<'a> {
    Record(&'a DiagnosticsRecord),
    Checkpoint { step: u64, batch: u64, agent: &'a Agent },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub normalizer: Option<Normalizer>,
    pub records: usize,
    pub batches: u64,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct RolloutStats {
    entropy: f64,
    policy_variance: f64,
    actor: RepresentationStats,
    critic: RepresentationStats,
}

fn rollout_stats(cfg: &TrainConfig, batch: &RolloutBatch) -> Result<RolloutStats> {
    let entropy = match &batch.old_dist {
        DistParams::Categorical { logits } => mean(&categorical_entropy(logits)).unwrap_or(0.0),
        DistParams::TanhNormal { .. } => -mean(&batch.old_log_probs).unwrap_or(0.0),
    };
    let d = &cfg.diagnostics;
    let act = cfg.network.activation;
    Ok(RolloutStats {
        entropy,
        policy_variance: policy_variance_across_states(&batch.old_dist)?,
        actor: representation_stats(&batch.actor_probe, act, d.rank_delta, d.feature_rank_delta)?,
        critic: representation_stats(&batch.critic_probe, act, d.rank_delta, d.feature_rank_delta)?,
    })
}

struct EpochResult {
    losses: LossStats,
    diverged: Option<String>,
}

fn optimize(
    cfg: &TrainConfig,
    agent: &mut Agent,
    batch: &RolloutBatch,
    state: &mut AdamState,
    shuffle_rng: &mut crate::rng::StreamRng,
) -> Result<EpochResult> {
    let ppo = &cfg.ppo;
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut flat = agent.flat();
    let mut acc = LossStats::default();
    let mut steps = 0usize;
    for _ in 0..ppo.epochs {
        order.shuffle(shuffle_rng);
        for mb in order.chunks_exact(ppo.minibatch_size) {
            let mut g = Graph::with_execution(cfg.execution);
            let mut params = ParameterSet::new();
            let nodes = total_loss(&mut g, &mut params, agent, batch, mb, ppo)?;
            let total = g.value(nodes.total).get(0, 0);
            if !total.is_finite() {
                return Ok(EpochResult {
                    losses: acc,
                    diverged: Some(format!("non-finite loss {total}")),
                });
            }
            g.backward(nodes.total)?;
            let mut grad = params.flat_gradient(&g);
            let norm = clip_grad_norm(&mut grad, ppo.max_grad_norm)?;
            if !norm.is_finite() {
                return Ok(EpochResult {
                    losses: acc,
                    diverged: Some(format!("non-finite gradient norm {norm}")),
                });
            }
            adam_step(&mut flat, &grad, state, &ppo.adam)?;
            agent.set_flat(&flat)?;

            acc.policy_objective += g.value(nodes.clip_objective).get(0, 0);
            acc.value_loss += g.value(nodes.value_loss).get(0, 0);
            acc.entropy += g.value(nodes.entropy).get(0, 0);
            acc.pfo_loss += nodes.pfo.map_or(0.0, |p| g.value(p).get(0, 0));
            acc.total_loss += total;
            acc.grad_norm += norm;
            steps += 1;
        }
    }
    let k = steps.max(1) as f64;
    let losses = LossStats {
        policy_objective: acc.policy_objective / k,
        value_loss: acc.value_loss / k,
        entropy: acc.entropy / k,
        pfo_loss: acc.pfo_loss / k,
        total_loss: acc.total_loss / k,
        grad_norm: acc.grad_norm / k,
    };
    Ok(EpochResult { losses, diverged: None })
}

/// Probability ratios `π_θ / π_old` on the whole batch.
pub fn batch_ratios(agent: &Agent, batch: &RolloutBatch) -> Result<Vec<f64>> {
    let (_, _, lp) = policy_snapshot(agent, &batch.observations, &batch.actions)?;
    Ok(lp.iter().zip(&batch.old_log_probs).map(|(n, o)| (n - o).exp()).collect())
}

/// The frozen observation normalizer of a run, if it uses one. Depends
/// only on the config and the `"normalizer"` stream.
pub fn run_normalizer(cfg: &TrainConfig, streams: &RngStreams) -> Result<Option<Normalizer>> {
    if !cfg.normalize_observations {
        return Ok(None);
    }
    let obs = uniform_rollout(
        &cfg.env,
        cfg.batch_size(),
        cfg.normalizer_min_episodes,
        streams.seed("normalizer", 0),
    )?;
    Ok(Some(fit_obs_normalizer(&obs)?))
}

/// The capacity probe of a run: a fresh agent drawn from the
/// `"capacity_target"` stream, fitted with the run's optimizer settings.
pub fn run_capacity_probe(cfg: &TrainConfig, streams: &RngStreams, normalizer: Option<&Normalizer>) -> Result<CapacityProbe> {
    let target = Agent::new(
        &cfg.actor_spec(),
        &cfg.critic_spec(),
        cfg.network.shared_trunk,
        streams.seed("capacity_target", 0),
    )?;
    let budget = CapacityBudget {
        epochs: cfg.diagnostics.capacity_epochs,
        minibatch_size: cfg.ppo.minibatch_size,
        adam: cfg.ppo.adam,
        max_grad_norm: Some(cfg.ppo.max_grad_norm),
    };
    CapacityProbe::collect(
        target,
        &cfg.env,
        normalizer,
        cfg.diagnostics.capacity_dataset_size,
        budget,
        streams.seed("capacity", 0),
    )
}

/// Runs the full collect / optimize loop, reporting records and
/// checkpoints through `on_event`.
///
/// A non-finite loss or gradient emits a record with `diverged = true` and
/// returns [`Error::Diverged`].
pub fn train(cfg: &TrainConfig, on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let streams = RngStreams::new(cfg.seed);
    let actor_spec = cfg.actor_spec();
    let critic_spec = cfg.critic_spec();
    let mut agent = Agent::new(&actor_spec, &critic_spec, cfg.network.shared_trunk, streams.seed("init", 0))?;

    let normalizer = run_normalizer(cfg, &streams)?;

    let mut collector = Collector::new(&cfg.env, cfg.n_envs, normalizer.clone(), &streams, cfg.execution)?;

    let n_batches = cfg.n_batches();
    let diag_ticks = diagnostics_ticks(n_batches, cfg.diagnostics.fraction);
    let cap_ticks = capacity_ticks(n_batches, cfg.diagnostics.capacity_fraction);
    let probe = if cap_ticks.is_empty() {
        None
    } else {
        Some(run_capacity_probe(cfg, &streams, normalizer.as_ref())?)
    };

    let mut state = AdamState::new(agent.param_count());
    let mut shuffle_rng = streams.stream("shuffle", 0);
    let continuous = !cfg.env.kind.is_discrete();
    let mut records = 0usize;

    for b in 0..n_batches {
        let batch = collector.collect(&agent, cfg.steps_per_env, &cfg.ppo.gae)?;
        let step = (b + 1) * cfg.batch_size() as u64;
        let stats = rollout_stats(cfg, &batch)?;
        if cfg.ppo.adam_reset_each_batch {
            state.reset();
        }
        let result = optimize(cfg, &mut agent, &batch, &mut state, &mut shuffle_rng)?;

        let ratio = if result.diverged.is_none() {
            ratio_stats(&batch_ratios(&agent, &batch)?, cfg.ppo.clip_eps, continuous)
        } else {
            ratio_stats(&[], cfg.ppo.clip_eps, continuous)
        };

        let (mut capacity_actor, mut capacity_critic) = (None, None);
        if result.diverged.is_none() && cap_ticks.contains(&b) {
            on_event(TrainEvent::Checkpoint { step, batch: b, agent: &agent })?;
            if let Some(probe) = &probe {
                let heads = cfg.execution.map(vec![CapacityHead::Actor, CapacityHead::Critic], |h| {
                    capacity_loss(&agent, probe, h)
                });
                let mut it = heads.into_iter();
                capacity_actor = Some(it.next().expect("two heads")?);
                capacity_critic = Some(it.next().expect("two heads")?);
            }
        }

        if result.diverged.is_some() || diag_ticks.contains(&b) || cap_ticks.contains(&b) {
            let eps = &batch.episode_returns;
            let record = DiagnosticsRecord {
                step,
                batch: b,
                episodes: eps.len(),
                episode_return_mean: mean(eps),
                episode_return_min: eps.iter().copied().reduce(f64::min),
                episode_return_max: eps.iter().copied().reduce(f64::max),
                entropy: stats.entropy,
                policy_variance: stats.policy_variance,
                actor: stats.actor,
                critic: stats.critic,
                ratio,
                losses: result.losses,
                capacity_actor,
                capacity_critic,
                diverged: result.diverged.is_some(),
            };
            on_event(TrainEvent::Record(&record))?;
            records += 1;
        }
        if let Some(reason) = result.diverged {
            return Err(Error::Diverged { step, reason });
        }
    }
    Ok(TrainOutcome {
        agent,
        normalizer,
        records,
        batches: n_batches,
    })
}
