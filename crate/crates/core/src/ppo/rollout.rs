use rand::Rng;

use crate::advantage::{compute_gae, GaeConfig};
use crate::autodiff::Graph;
use crate::envs::{apply_normalizer, Env, EnvConfig, Normalizer, StepResult};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matrix::Matrix;
use crate::networks::{actor_forward, critic_forward, log_prob_node, sample_actions, ActionBatch, Agent, DistParams, FeatureProbe};
use crate::rng::{RngStreams, StreamRng};

/// One rollout of `n_envs × steps_per_env` transitions, stored env-major:
/// row `i * steps_per_env + t` is step `t` of environment `i`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps_per_env: usize,
    /// Normalized observations fed to the networks.
    pub observations: Matrix,
    pub actions: ActionBatch,
    /// `log π_old(a|s)`, computed through the same graph ops as training.
    pub old_log_probs: Vec<f64>,
    pub old_dist: DistParams,
    /// Actor pre-activations of every hidden layer under π_old.
    pub old_preacts: Vec<Matrix>,
    pub actor_probe: FeatureProbe,
    pub critic_probe: FeatureProbe,
    /// Rewards seen by the agent (after masking).
    pub rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Unmasked returns of episodes that ended during this rollout.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct EnvSlot {
    env: Env,
    obs: Vec<f64>,
    reset_rng: StreamRng,
    episode_return: f64,
}

struct StepOutcome {
    result: StepResult,
    /// Normalized final observation of a truncated, non-terminal episode.
    final_obs: Option<Vec<f64>>,
    episode_return: Option<f64>,
}

/// A set of independent environments that persists across rollouts.
#[derive(Debug, Clone)]
pub struct Collector {
    slots: Vec<EnvSlot>,
    normalizer: Option<Normalizer>,
    policy_rng: StreamRng,
    exec: Execution,
    env_seed: u64,
}

fn normalize(n: &Option<Normalizer>, obs: Vec<f64>) -> Result<Vec<f64>> {
    match n {
        Some(n) => apply_normalizer(n, &obs),
        None => Ok(obs),
    }
}

impl Collector {
    /// Environment `i` draws its reset seeds from stream `("env", i)`;
    /// actions are sampled from stream `("policy", 0)`. `env_cfg.seed` is
    /// mixed into every reset seed.
    pub fn new(
        env_cfg: &EnvConfig,
        n_envs: usize,
        normalizer: Option<Normalizer>,
        streams: &RngStreams,
        exec: Execution,
    ) -> Result<Self> {
        if n_envs == 0 {
            return Err(Error::Config("n_envs must be positive".into()));
        }
        let mut slots = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            let mut env = Env::new(env_cfg)?;
            let mut reset_rng = streams.stream("env", i as u64);
            let raw = env.reset(reset_rng.random::<u64>() ^ env_cfg.seed);
            slots.push(EnvSlot {
                obs: normalize(&normalizer, raw)?,
                env,
                reset_rng,
                episode_return: 0.0,
            });
        }
        Ok(Self {
            slots,
            normalizer,
            policy_rng: streams.stream("policy", 0),
            exec,
            env_seed: env_cfg.seed,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.slots.len()
    }

    pub fn collect(&mut self, agent: &Agent, steps_per_env: usize, gae: &GaeConfig) -> Result<RolloutBatch> {
        if steps_per_env == 0 {
            return Err(Error::Config("steps_per_env must be positive".into()));
        }
        let n = self.slots.len();
        let t_len = steps_per_env;
        let mut obs_rows: Vec<Vec<f64>> = vec![Vec::new(); n * t_len];
        let mut step_actions = Vec::with_capacity(t_len);
        let mut rewards = vec![0.0; n * t_len];
        let mut raw_rewards = vec![0.0; n * t_len];
        let mut terminated = vec![false; n * t_len];
        let mut truncated = vec![false; n * t_len];
        let mut finals: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut episode_returns = Vec::new();
        let env_seed = self.env_seed;

        for t in 0..t_len {
            let obs = Matrix::from_rows(&self.slots.iter().map(|s| s.obs.clone()).collect::<Vec<_>>())?;
            let (dist, _) = actor_forward(&agent.actor, &obs)?;
            let (actions, _) = sample_actions(&dist, &mut self.policy_rng)?;
            let norm = &self.normalizer;
            let outcomes = self.exec.map_mut(&mut self.slots, |i, slot| -> Result<StepOutcome> {
                let result = slot.env.step(&actions.env_action(i))?;
                slot.episode_return += result.raw_reward;
                let done = result.terminated || result.truncated;
                let final_obs = if result.truncated && !result.terminated {
                    Some(normalize(norm, result.observation.clone())?)
                } else {
                    None
                };
                let mut episode_return = None;
                slot.obs = if done {
                    episode_return = Some(slot.episode_return);
                    slot.episode_return = 0.0;
                    let seed = slot.reset_rng.random::<u64>() ^ env_seed;
                    normalize(norm, slot.env.reset(seed))?
                } else {
                    normalize(norm, result.observation.clone())?
                };
                Ok(StepOutcome {
                    result,
                    final_obs,
                    episode_return,
                })
            });
            for (i, out) in outcomes.into_iter().enumerate() {
                let out = out?;
                let row = i * t_len + t;
                obs_rows[row] = obs.row(i).to_vec();
                rewards[row] = out.result.reward;
                raw_rewards[row] = out.result.raw_reward;
                terminated[row] = out.result.terminated;
                truncated[row] = out.result.truncated;
                if let Some(f) = out.final_obs {
                    finals.push((row, f));
                }
                if let Some(r) = out.episode_return {
                    episode_returns.push(r);
                }
            }
            step_actions.push(actions);
        }

        let time_major = ActionBatch::concat(&step_actions)?;
        let perm: Vec<usize> = (0..n * t_len).map(|r| (r % t_len) * n + r / t_len).collect();
        let actions = time_major.select_rows(&perm);
        let observations = Matrix::from_rows(&obs_rows)?;

        let (old_dist, actor_probe, old_log_probs) = policy_snapshot(agent, &observations, &actions)?;
        let critic = agent.critic_standalone();
        let (values, critic_probe) = critic_forward(&critic, &observations)?;

        let mut extra: Vec<Vec<f64>> = finals.iter().map(|(_, o)| o.clone()).collect();
        extra.extend(self.slots.iter().map(|s| s.obs.clone()));
        let (extra_values, _) = critic_forward(&critic, &Matrix::from_rows(&extra)?)?;

        let mut gae_rewards = rewards.clone();
        let mut gae_done: Vec<bool> = terminated.iter().zip(&truncated).map(|(a, b)| *a || *b).collect();
        for (k, (row, _)) in finals.iter().enumerate() {
            gae_rewards[*row] += gae.gamma * extra_values[k];
            gae_done[*row] = true;
        }
        let mut advantages = vec![0.0; n * t_len];
        let mut returns = vec![0.0; n * t_len];
        for i in 0..n {
            let seg = i * t_len..(i + 1) * t_len;
            let bootstrap = extra_values[finals.len() + i];
            let (a, r) = compute_gae(
                &gae_rewards[seg.clone()],
                &values[seg.clone()],
                bootstrap,
                &gae_done[seg.clone()],
                gae,
            )?;
            advantages[seg.clone()].copy_from_slice(&a);
            returns[seg].copy_from_slice(&r);
        }

        Ok(RolloutBatch {
            n_envs: n,
            steps_per_env: t_len,
            observations,
            old_preacts: actor_probe.pre_activations.clone(),
            actions,
            old_log_probs,
            old_dist,
            actor_probe,
            critic_probe,
            rewards,
            raw_rewards,
            terminated,
            truncated,
            values,
            advantages,
            returns,
            episode_returns,
        })
    }
}

/// Distribution parameters, actor probe and log-probabilities of `actions`
/// under the current actor.
pub(crate) fn policy_snapshot(agent: &Agent, obs: &Matrix, actions: &ActionBatch) -> Result<(DistParams, FeatureProbe, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = agent.bind_constant(&mut g)?;
    let x = g.constant(obs.clone());
    let (head, trunk) = agent.actor_nodes(&mut g, x, &bound)?;
    let lp = log_prob_node(&mut g, &head, actions)?;
    let dist = head
        .dist_params(&g)
        .ok_or_else(|| Error::Config("actor has a value head".into()))?;
    Ok((dist, trunk.probe(&g), g.value(lp).data().to_vec()))
}

/// Collects one rollout with `collector`'s environments.
pub fn collect_rollout(
    agent: &Agent,
    collector: &mut Collector,
    steps_per_env: usize,
    gae: &GaeConfig,
) -> Result<RolloutBatch> {
    collector.collect(agent, steps_per_env, gae)
}
