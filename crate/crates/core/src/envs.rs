//! Desk-scale finite-horizon environments.
//!
//! * `chain_dense`: a 4 x 6 grid (24 cells), four moves, shaped reward toward
//!   the goal, horizon 64, sticky actions.
//! * `chain_sparse_masked`: the same grid with each reward zeroed with
//!   probability `reward_mask_prob` (0.9 by default).
//! * `point_mass`: a 2-D point driven by a continuous action in (−1, 1)²,
//!   rewarded by negative squared distance to a fixed goal, horizon 128.
//!
//! Every observation ends with the normalized time step `t / t_max`.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;

pub const GRID_ROWS: usize = 4;
pub const GRID_COLS: usize = 6;
pub const GRID_CELLS: usize = GRID_ROWS * GRID_COLS;
pub const GRID_ACTIONS: usize = 4;
pub const GRID_START: (usize, usize) = (0, 0);
pub const GRID_GOAL: (usize, usize) = (GRID_ROWS - 1, GRID_COLS - 1);
/// Reward per unit of Manhattan progress toward the goal.
pub const SHAPING_SCALE: f64 = 0.1;
pub const STEP_COST: f64 = 0.01;
pub const GOAL_BONUS: f64 = 1.0;

pub const POINT_GOAL: [f64; 2] = [0.5, -0.5];
pub const POINT_SPEED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    ChainDense,
    ChainSparseMasked,
    PointMass,
}

impl EnvKind {
    pub fn is_discrete(self) -> bool {
        !matches!(self, EnvKind::PointMass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub horizon: usize,
    pub sticky_action_prob: f64,
    pub reward_mask_prob: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn defaults(kind: EnvKind) -> Self {
        match kind {
            EnvKind::ChainDense => Self {
                kind,
                horizon: 64,
                sticky_action_prob: 0.25,
                reward_mask_prob: 0.0,
                seed: 0,
            },
            EnvKind::ChainSparseMasked => Self {
                kind,
                horizon: 64,
                sticky_action_prob: 0.25,
                reward_mask_prob: 0.9,
                seed: 0,
            },
            EnvKind::PointMass => Self {
                kind,
                horizon: 128,
                sticky_action_prob: 0.0,
                reward_mask_prob: 0.0,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("env.horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sticky_action_prob) {
            return Err(Error::Config("env.sticky_action_prob must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.reward_mask_prob) {
            return Err(Error::Config("env.reward_mask_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    /// Reward seen by the agent (after masking).
    pub reward: f64,
    /// Reward before masking; episode returns are reported from this.
    pub raw_reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Zeroes `reward` with probability `p`. Always consumes one draw.
pub fn apply_reward_mask<R: Rng + ?Sized>(reward: f64, p: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if u < p {
        0.0
    } else {
        reward
    }
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    cfg: EnvConfig,
    pos: (usize, usize),
    prev_action: Option<usize>,
    t: usize,
    done: bool,
    rng: StreamRng,
}

fn manhattan(p: (usize, usize)) -> usize {
    p.0.abs_diff(GRID_GOAL.0) + p.1.abs_diff(GRID_GOAL.1)
}

/// Deterministic move; actions are up, right, down, left. Walls block.
pub fn grid_move(p: (usize, usize), action: usize) -> (usize, usize) {
    match action {
        0 => (p.0.saturating_sub(1), p.1),
        1 => (p.0, (p.1 + 1).min(GRID_COLS - 1)),
        2 => ((p.0 + 1).min(GRID_ROWS - 1), p.1),
        _ => (p.0, p.1.saturating_sub(1)),
    }
}

/// Unmasked reward of moving from `from` to `to`.
pub fn grid_reward(from: (usize, usize), to: (usize, usize)) -> f64 {
    let progress = manhattan(from) as f64 - manhattan(to) as f64;
    let bonus = if to == GRID_GOAL { GOAL_BONUS } else { 0.0 };
    SHAPING_SCALE * progress - STEP_COST + bonus
}

impl GridWorld {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rng: StreamRng::seed_from_u64(cfg.seed),
            cfg,
            pos: GRID_START,
            prev_action: None,
            t: 0,
            done: false,
        })
    }

    pub fn obs_dim() -> usize {
        GRID_CELLS + GRID_ACTIONS + 1
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    fn observe(&self) -> Vec<f64> {
        let mut o = vec![0.0; Self::obs_dim()];
        o[self.pos.0 * GRID_COLS + self.pos.1] = 1.0;
        if let Some(a) = self.prev_action {
            o[GRID_CELLS + a] = 1.0;
        }
        o[GRID_CELLS + GRID_ACTIONS] = self.t as f64 / self.cfg.horizon as f64;
        o
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = StreamRng::seed_from_u64(seed);
        self.pos = GRID_START;
        self.prev_action = None;
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called after the episode ended".into()));
        }
        if action >= GRID_ACTIONS {
            return Err(Error::Env(format!("action {action} out of range")));
        }
        let sticky: f64 = self.rng.random();
        let executed = match self.prev_action {
            Some(prev) if sticky < self.cfg.sticky_action_prob => prev,
            _ => action,
        };
        let next = grid_move(self.pos, executed);
        let raw_reward = grid_reward(self.pos, next);
        let reward = if self.cfg.reward_mask_prob > 0.0 {
            apply_reward_mask(raw_reward, self.cfg.reward_mask_prob, &mut self.rng)
        } else {
            raw_reward
        };
        self.pos = next;
        self.prev_action = Some(executed);
        self.t += 1;
        let terminated = next == GRID_GOAL;
        let truncated = !terminated && self.t >= self.cfg.horizon;
        self.done = terminated || truncated;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            raw_reward,
            terminated,
            truncated,
        })
    }
}

/// Exact finite-horizon dynamic programming over `(cell, previous action, t)`
/// using expected (mask-averaged) rewards.
#[derive(Debug, Clone)]
pub struct GridSolution {
    /// `values[t][state]`, state = cell * 5 + prev (4 = none)
    pub values: Vec<Vec<f64>>,
    /// Greedy action per `(t, state)`; ties resolve to the lowest index.
    pub policy: Vec<Vec<usize>>,
}

impl GridSolution {
    pub fn optimal_return(&self) -> f64 {
        self.values[0][grid_state_index(GRID_START, None)]
    }
}

pub fn grid_state_index(pos: (usize, usize), prev: Option<usize>) -> usize {
    (pos.0 * GRID_COLS + pos.1) * (GRID_ACTIONS + 1) + prev.unwrap_or(GRID_ACTIONS)
}

pub fn solve_grid(cfg: &EnvConfig) -> Result<GridSolution> {
    cfg.validate()?;
    if !cfg.kind.is_discrete() {
        return Err(Error::Config("solve_grid needs a chain environment".into()));
    }
    let n_states = GRID_CELLS * (GRID_ACTIONS + 1);
    let keep = 1.0 - cfg.reward_mask_prob;
    let q = cfg.sticky_action_prob;
    let mut values = vec![vec![0.0; n_states]; cfg.horizon + 1];
    let mut policy = vec![vec![0; n_states]; cfg.horizon];
    for t in (0..cfg.horizon).rev() {
        for cell in 0..GRID_CELLS {
            let pos = (cell / GRID_COLS, cell % GRID_COLS);
            for prev_i in 0..=GRID_ACTIONS {
                let prev = (prev_i < GRID_ACTIONS).then_some(prev_i);
                let s = grid_state_index(pos, prev);
                if pos == GRID_GOAL {
                    continue;
                }
                let outcome = |executed: usize| {
                    let next = grid_move(pos, executed);
                    let cont = if next == GRID_GOAL {
                        0.0
                    } else {
                        values[t + 1][grid_state_index(next, Some(executed))]
                    };
                    keep * grid_reward(pos, next) + cont
                };
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0;
                for a in 0..GRID_ACTIONS {
                    let v = match prev {
                        Some(p) => q * outcome(p) + (1.0 - q) * outcome(a),
                        None => outcome(a),
                    };
                    if a == 0 || v > best + 1e-12 {
                        best = v;
                        best_a = a;
                    }
                }
                values[t][s] = best;
                policy[t][s] = best_a;
            }
        }
    }
    Ok(GridSolution { values, policy })
}

#[derive(Debug, Clone)]
pub struct PointMass {
    cfg: EnvConfig,
    pos: [f64; 2],
    t: usize,
    done: bool,
    rng: StreamRng,
}

impl PointMass {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rng: StreamRng::seed_from_u64(cfg.seed),
            cfg,
            pos: [0.0, 0.0],
            t: 0,
            done: false,
        })
    }

    pub fn obs_dim() -> usize {
        3
    }

    pub fn action_dim() -> usize {
        2
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.t as f64 / self.cfg.horizon as f64]
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = StreamRng::seed_from_u64(seed);
        self.pos = [self.rng.random_range(-1.0..1.0), self.rng.random_range(-1.0..1.0)];
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("step called after the episode ended".into()));
        }
        if action.len() != 2 || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env("point_mass expects two finite action components".into()));
        }
        for (p, &a) in self.pos.iter_mut().zip(action) {
            *p = (*p + POINT_SPEED * a.clamp(-1.0, 1.0)).clamp(-1.0, 1.0);
        }
        let d2: f64 = self.pos.iter().zip(POINT_GOAL).map(|(p, g)| (p - g) * (p - g)).sum();
        let raw_reward = -d2;
        let reward = if self.cfg.reward_mask_prob > 0.0 {
            apply_reward_mask(raw_reward, self.cfg.reward_mask_prob, &mut self.rng)
        } else {
            raw_reward
        };
        self.t += 1;
        let truncated = self.t >= self.cfg.horizon;
        self.done = truncated;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            raw_reward,
            terminated: false,
            truncated,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Env {
    Grid(GridWorld),
    PointMass(PointMass),
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        Ok(match cfg.kind {
            EnvKind::ChainDense | EnvKind::ChainSparseMasked => Env::Grid(GridWorld::new(cfg.clone())?),
            EnvKind::PointMass => Env::PointMass(PointMass::new(cfg.clone())?),
        })
    }

    pub fn obs_dim_for(kind: EnvKind) -> usize {
        match kind {
            EnvKind::PointMass => PointMass::obs_dim(),
            _ => GridWorld::obs_dim(),
        }
    }

    pub fn action_space_for(kind: EnvKind) -> ActionSpace {
        match kind {
            EnvKind::PointMass => ActionSpace::Continuous(PointMass::action_dim()),
            _ => ActionSpace::Discrete(GRID_ACTIONS),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Env::Grid(_) => GridWorld::obs_dim(),
            Env::PointMass(_) => PointMass::obs_dim(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::Grid(_) => ActionSpace::Discrete(GRID_ACTIONS),
            Env::PointMass(_) => ActionSpace::Continuous(PointMass::action_dim()),
        }
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            Env::Grid(e) => e.reset(seed),
            Env::PointMass(e) => e.reset(seed),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        match (self, action) {
            (Env::Grid(e), Action::Discrete(a)) => e.step(*a),
            (Env::PointMass(e), Action::Continuous(a)) => e.step(a),
            _ => Err(Error::Env("action kind does not match the environment".into())),
        }
    }
}

/// Frozen per-dimension standardization. The trailing time feature passes
/// through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const NORMALIZER_STD_FLOOR: f64 = 1e-8;

/// Fits mean and std on `observations` (rows), leaving the last column as is.
pub fn fit_obs_normalizer(observations: &Matrix) -> Result<Normalizer> {
    let (n, d) = observations.shape();
    if n == 0 || d == 0 {
        return Err(Error::Empty("fit_obs_normalizer"));
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![1.0; d];
    for c in 0..d - 1 {
        let col = observations.column(c);
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean[c] = m;
        std[c] = var.sqrt().max(NORMALIZER_STD_FLOOR);
    }
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, obs: &[f64]) -> Result<Vec<f64>> {
        apply_normalizer(self, obs)
    }
}

pub fn apply_normalizer(norm: &Normalizer, obs: &[f64]) -> Result<Vec<f64>> {
    if obs.len() != norm.mean.len() {
        return Err(crate::error::shape_err(
            "apply_normalizer",
            format!("observation has {} dims, normalizer {}", obs.len(), norm.mean.len()),
        ));
    }
    let last = obs.len() - 1;
    Ok(obs
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == last { x } else { (x - norm.mean[i]) / norm.std[i] })
        .collect())
}

/// Runs a uniform random policy until at least `min_steps` steps and
/// `min_episodes` complete episodes are collected; returns raw observations.
pub fn uniform_rollout(cfg: &EnvConfig, min_steps: usize, min_episodes: usize, seed: u64) -> Result<Matrix> {
    let mut env = Env::new(cfg)?;
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut episodes = 0;
    let mut obs = env.reset(rng.random());
    while rows.len() < min_steps || episodes < min_episodes {
        rows.push(obs.clone());
        let action = match env.action_space() {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            ActionSpace::Continuous(k) => Action::Continuous((0..k).map(|_| rng.random_range(-1.0..1.0)).collect()),
        };
        let r = env.step(&action)?;
        obs = if r.terminated || r.truncated {
            episodes += 1;
            env.reset(rng.random())
        } else {
            r.observation
        };
    }
    Matrix::from_rows(&rows)
}
