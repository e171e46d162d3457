//! Actor, critic and shared-trunk MLPs.
//!
//! The last hidden layer is the penultimate layer; its activations are the
//! features that every representation metric reads. Forward passes record a
//! [`FeatureProbe`] with the pre-activations and activations of every hidden
//! layer.

mod checkpoint;
mod dist;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dist::{
    categorical_entropy, categorical_sample_logprob_entropy, log_prob_node, sample_actions, tanhnormal_log_prob,
    tanhnormal_sample_logprob, ActionBatch, DistParams, TANH_EPS,
};

use crate::autodiff::{Activation, Graph, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Added after softplus so the TanhNormal scale never reaches zero.
pub const STD_FLOOR: f64 = 1e-6;

pub const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
pub const ACTOR_OUTPUT_GAIN: f64 = 0.01;
pub const CRITIC_OUTPUT_GAIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Categorical { n_actions: usize },
    TanhNormal { action_dim: usize },
    Value,
}

impl HeadKind {
    fn output_layers(self) -> Vec<(usize, f64)> {
        match self {
            HeadKind::Categorical { n_actions } => vec![(n_actions, ACTOR_OUTPUT_GAIN)],
            HeadKind::TanhNormal { action_dim } => {
                vec![(action_dim, ACTOR_OUTPUT_GAIN), (action_dim, ACTOR_OUTPUT_GAIN)]
            }
            HeadKind::Value => vec![(1, CRITIC_OUTPUT_GAIN)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub head: HeadKind,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden_widths must be a non-empty list of positive widths".into()));
        }
        if self.activation == Activation::Softplus {
            return Err(Error::Config("hidden activation must be relu or tanh".into()));
        }
        match self.head {
            HeadKind::Categorical { n_actions: 0 } | HeadKind::TanhNormal { action_dim: 0 } => {
                Err(Error::Config("head size must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn penultimate_width(&self) -> usize {
        *self.hidden_widths.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in x out`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

impl DenseLayer {
    fn orthogonal(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: orthogonal_matrix(inputs, outputs, gain, rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Random matrix with orthonormal columns (or rows, whichever is shorter),
/// scaled by `gain`.
pub fn orthogonal_matrix(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Matrix {
    let tall = rows >= cols;
    let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
    // k vectors of length n, orthonormalized by modified Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut m = Matrix::zeros(rows, cols);
    for (j, q) in basis.iter().enumerate() {
        for (i, &x) in q.iter().enumerate() {
            if tall {
                m.set(i, j, gain * x);
            } else {
                m.set(j, i, gain * x);
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: MlpSpec,
    pub hidden: Vec<DenseLayer>,
    /// One layer for categorical and value heads; mean then raw-std for TanhNormal.
    pub head: Vec<DenseLayer>,
}

/// Orthogonal init with zero biases, deterministic per seed.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = Vec::with_capacity(spec.hidden_widths.len());
    let mut fan_in = spec.input_dim;
    for &w in &spec.hidden_widths {
        hidden.push(DenseLayer::orthogonal(fan_in, w, HIDDEN_GAIN, &mut rng));
        fan_in = w;
    }
    let head = spec
        .head
        .output_layers()
        .into_iter()
        .map(|(out, gain)| DenseLayer::orthogonal(fan_in, out, gain, &mut rng))
        .collect();
    Ok(NetworkParams {
        spec: spec.clone(),
        hidden,
        head,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct BoundNetwork {
    pub hidden: Vec<BoundLayer>,
    pub head: Vec<BoundLayer>,
}

fn bind_layers(
    layers: &[DenseLayer],
    g: &mut Graph,
    params: Option<(&mut ParameterSet, &str)>,
) -> Result<Vec<BoundLayer>> {
    let mut out = Vec::with_capacity(layers.len());
    match params {
        Some((set, prefix)) => {
            for (i, l) in layers.iter().enumerate() {
                let weight = g.parameter(l.weight.clone());
                let bias = g.parameter(l.bias.clone());
                set.insert(format!("{prefix}.{i}.weight"), weight)?;
                set.insert(format!("{prefix}.{i}.bias"), bias)?;
                out.push(BoundLayer { weight, bias });
            }
        }
        None => {
            for l in layers {
                out.push(BoundLayer {
                    weight: g.constant(l.weight.clone()),
                    bias: g.constant(l.bias.clone()),
                });
            }
        }
    }
    Ok(out)
}

/// Graph nodes for every hidden layer of one forward pass.
#[derive(Debug, Clone)]
pub struct TrunkNodes {
    pub preacts: Vec<Var>,
    pub acts: Vec<Var>,
}

impl TrunkNodes {
    pub fn features(&self) -> Var {
        *self.acts.last().expect("non-empty trunk")
    }

    pub fn probe(&self, g: &Graph) -> FeatureProbe {
        FeatureProbe {
            pre_activations: self.preacts.iter().map(|&v| g.value(v).clone()).collect(),
            activations: self.acts.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

pub fn trunk_forward(g: &mut Graph, x: Var, hidden: &[BoundLayer], activation: Activation) -> Result<TrunkNodes> {
    let mut preacts = Vec::with_capacity(hidden.len());
    let mut acts = Vec::with_capacity(hidden.len());
    let mut h = x;
    for l in hidden {
        let z = g.linear(h, l.weight, l.bias)?;
        h = g.activation(z, activation);
        preacts.push(z);
        acts.push(h);
    }
    Ok(TrunkNodes { preacts, acts })
}

#[derive(Debug, Clone, Copy)]
pub enum HeadNodes {
    Logits(Var),
    TanhNormal { mean: Var, std: Var },
    Value(Var),
}

pub fn head_forward(g: &mut Graph, features: Var, head: &[BoundLayer], kind: HeadKind) -> Result<HeadNodes> {
    Ok(match kind {
        HeadKind::Categorical { .. } => HeadNodes::Logits(g.linear(features, head[0].weight, head[0].bias)?),
        HeadKind::Value => HeadNodes::Value(g.linear(features, head[0].weight, head[0].bias)?),
        HeadKind::TanhNormal { .. } => {
            let mean = g.linear(features, head[0].weight, head[0].bias)?;
            let raw = g.linear(features, head[1].weight, head[1].bias)?;
            let sp = g.activation(raw, Activation::Softplus);
            let std = g.offset(sp, STD_FLOOR);
            HeadNodes::TanhNormal { mean, std }
        }
    })
}

impl HeadNodes {
    pub fn dist_params(&self, g: &Graph) -> Option<DistParams> {
        match *self {
            HeadNodes::Logits(l) => Some(DistParams::Categorical {
                logits: g.value(l).clone(),
            }),
            HeadNodes::TanhNormal { mean, std } => Some(DistParams::TanhNormal {
                mean: g.value(mean).clone(),
                std: g.value(std).clone(),
            }),
            HeadNodes::Value(_) => None,
        }
    }

    pub fn values(&self, g: &Graph) -> Option<Vec<f64>> {
        match *self {
            HeadNodes::Value(v) => Some(g.value(v).data().to_vec()),
            _ => None,
        }
    }
}

impl NetworkParams {
    pub fn param_count(&self) -> usize {
        self.hidden.iter().chain(&self.head).map(DenseLayer::param_count).sum()
    }

    /// Binds every layer as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Result<BoundNetwork> {
        Ok(BoundNetwork {
            hidden: bind_layers(&self.hidden, g, None)?,
            head: bind_layers(&self.head, g, None)?,
        })
    }

    /// Binds every layer as a trainable leaf registered under `prefix`.
    pub fn bind_trainable(&self, g: &mut Graph, set: &mut ParameterSet, prefix: &str) -> Result<BoundNetwork> {
        let hidden = bind_layers(&self.hidden, g, Some((set, &format!("{prefix}.hidden"))))?;
        let head = bind_layers(&self.head, g, Some((set, &format!("{prefix}.head"))))?;
        Ok(BoundNetwork { hidden, head })
    }

    pub fn forward_nodes(&self, g: &mut Graph, x: Var, bound: &BoundNetwork) -> Result<(HeadNodes, TrunkNodes)> {
        let trunk = trunk_forward(g, x, &bound.hidden, self.spec.activation)?;
        let head = head_forward(g, trunk.features(), &bound.head, self.spec.head)?;
        Ok((head, trunk))
    }

    fn check_obs(&self, obs: &Matrix) -> Result<()> {
        if obs.cols() != self.spec.input_dim {
            return Err(crate::error::shape_err(
                "forward",
                format!("observation width {} vs input_dim {}", obs.cols(), self.spec.input_dim),
            ));
        }
        if !obs.all_finite() {
            return Err(Error::NonFinite("observations"));
        }
        Ok(())
    }

    fn evaluate(&self, obs: &Matrix) -> Result<(Graph, HeadNodes, TrunkNodes)> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g)?;
        let x = g.constant(obs.clone());
        let (head, trunk) = self.forward_nodes(&mut g, x, &bound)?;
        Ok((g, head, trunk))
    }

    /// Flattened parameters: per layer, weight then bias; hidden then head.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.hidden.iter().chain(&self.head) {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(crate::error::shape_err(
                "set_flat",
                format!("{} values for {} parameters", flat.len(), self.param_count()),
            ));
        }
        let mut off = 0;
        for l in self.hidden.iter_mut().chain(self.head.iter_mut()) {
            for m in [&mut l.weight, &mut l.bias] {
                let n = m.len();
                m.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }
}

/// Pre-activations and activations of every hidden layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProbe {
    pub pre_activations: Vec<Matrix>,
    pub activations: Vec<Matrix>,
}

impl FeatureProbe {
    pub fn penultimate_index(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn penultimate_preacts(&self) -> &Matrix {
        &self.pre_activations[self.penultimate_index()]
    }

    pub fn features(&self) -> &Matrix {
        &self.activations[self.penultimate_index()]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            pre_activations: self.pre_activations.iter().map(|m| m.select_rows(idx)).collect(),
            activations: self.activations.iter().map(|m| m.select_rows(idx)).collect(),
        }
    }
}

pub fn actor_forward(params: &NetworkParams, obs: &Matrix) -> Result<(DistParams, FeatureProbe)> {
    let (g, head, trunk) = params.evaluate(obs)?;
    let dist = head
        .dist_params(&g)
        .ok_or_else(|| Error::Config("actor_forward on a value network".into()))?;
    Ok((dist, trunk.probe(&g)))
}

pub fn critic_forward(params: &NetworkParams, obs: &Matrix) -> Result<(Vec<f64>, FeatureProbe)> {
    let (g, head, trunk) = params.evaluate(obs)?;
    let values = head
        .values(&g)
        .ok_or_else(|| Error::Config("critic_forward on a policy network".into()))?;
    Ok((values, trunk.probe(&g)))
}

/// Actor and critic, optionally sharing every layer but the heads.
///
/// With a shared trunk the critic keeps only its head; its hidden layers are
/// the actor's.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub actor: NetworkParams,
    pub critic: NetworkParams,
    pub shared_trunk: bool,
}

/// Graph bindings of an [`Agent`] for one optimization step.
#[derive(Debug, Clone)]
pub struct BoundAgent {
    pub actor: BoundNetwork,
    pub critic: BoundNetwork,
}

impl Agent {
    pub fn new(actor_spec: &MlpSpec, critic_spec: &MlpSpec, shared_trunk: bool, seed: u64) -> Result<Self> {
        if !matches!(critic_spec.head, HeadKind::Value) {
            return Err(Error::Config("critic head must be `value`".into()));
        }
        if matches!(actor_spec.head, HeadKind::Value) {
            return Err(Error::Config("actor head must be a policy head".into()));
        }
        if actor_spec.input_dim != critic_spec.input_dim {
            return Err(Error::Config("actor and critic input_dim differ".into()));
        }
        let actor = init_mlp(actor_spec, seed)?;
        let mut critic = init_mlp(critic_spec, seed ^ 0x5bd1_e995_0000_0001)?;
        if shared_trunk {
            if actor_spec.hidden_widths != critic_spec.hidden_widths || actor_spec.activation != critic_spec.activation {
                return Err(Error::Config("a shared trunk needs identical hidden layers".into()));
            }
            critic.hidden.clear();
        }
        Ok(Self {
            actor,
            critic,
            shared_trunk,
        })
    }

    /// The critic as a self-contained network (trunk copied in when shared).
    pub fn critic_standalone(&self) -> NetworkParams {
        let mut c = self.critic.clone();
        if self.shared_trunk {
            c.hidden = self.actor.hidden.clone();
        }
        c
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + self.critic.param_count()
    }

    /// Actor parameters followed by critic parameters (head only when shared).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.actor.flat();
        v.extend(self.critic.flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.actor.param_count();
        if flat.len() != self.param_count() {
            return Err(crate::error::shape_err("Agent::set_flat", "length mismatch"));
        }
        self.actor.set_flat(&flat[..n])?;
        self.critic.set_flat(&flat[n..])
    }

    /// Binds all parameters as trainable, in [`Agent::flat`] order.
    pub fn bind_trainable(&self, g: &mut Graph, set: &mut ParameterSet) -> Result<BoundAgent> {
        let actor = self.actor.bind_trainable(g, set, "actor")?;
        let mut critic = self.critic.bind_trainable(g, set, "critic")?;
        if self.shared_trunk {
            critic.hidden = actor.hidden.clone();
        }
        Ok(BoundAgent { actor, critic })
    }

    pub fn bind_constant(&self, g: &mut Graph) -> Result<BoundAgent> {
        let actor = self.actor.bind_constant(g)?;
        let mut critic = self.critic.bind_constant(g)?;
        if self.shared_trunk {
            critic.hidden = actor.hidden.clone();
        }
        Ok(BoundAgent { actor, critic })
    }

    /// Actor forward reusing `x`; returns head nodes and the actor trunk.
    pub fn actor_nodes(&self, g: &mut Graph, x: Var, bound: &BoundAgent) -> Result<(HeadNodes, TrunkNodes)> {
        self.actor.forward_nodes(g, x, &bound.actor)
    }

    /// Critic value node; reuses `actor_trunk` when the trunk is shared.
    pub fn critic_nodes(
        &self,
        g: &mut Graph,
        x: Var,
        bound: &BoundAgent,
        actor_trunk: Option<&TrunkNodes>,
    ) -> Result<(Var, TrunkNodes)> {
        let trunk = match (self.shared_trunk, actor_trunk) {
            (true, Some(t)) => t.clone(),
            _ => trunk_forward(g, x, &bound.critic.hidden, self.critic.spec.activation)?,
        };
        let head = head_forward(g, trunk.features(), &bound.critic.head, HeadKind::Value)?;
        match head {
            HeadNodes::Value(v) => Ok((v, trunk)),
            _ => unreachable!("critic head is a value head"),
        }
    }
}
