//! Acceptance suite: one test per criterion, each printing a single
//! `PASS criterion N: ...` or `FAIL criterion N: ...` line.
//!
//! Run with `cargo test -p ppo-dynamics-cli --test acceptance -- --nocapture`
//! to see the lines inline; they are written straight to stdout and show up
//! even without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Result};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use ppo_dynamics::advantage::{compute_gae, GaeConfig};
use ppo_dynamics::autodiff::{sigmoid, Activation, Graph, ParameterSet};
use ppo_dynamics::diagnostics::{
    capacity_loss, dead_neurons, ewma_smooth, excess_ratio, kendall_tau, normalized_l2, pearson,
    rank_report, rank_report_from_singular_values, ratio_stats, singular_values, spearman, window_aggregate,
    CapacityHead, DiagnosticsRecord, WindowMode, FEATURE_RANK_DELTA, RANK_DELTA,
};
use ppo_dynamics::envs::{solve_grid, EnvConfig, EnvKind};
use ppo_dynamics::networks::{actor_forward, init_mlp, orthogonal_matrix, Agent, HeadKind, MlpSpec};
use ppo_dynamics::ppo::{
    batch_ratios, run_capacity_probe, run_normalizer, total_loss, train, Collector, PfoScope, PpoConfig,
    RolloutBatch, TrainConfig, TrainEvent,
};
use ppo_dynamics::rng::{RngStreams, StreamRng};
use ppo_dynamics::toy::{toy_autodiff_step, toy_simulate, toy_step, ToyConfig, ToyState};
use ppo_dynamics::{Execution, Matrix};
use ppo_dynamics_cli::config::RunConfig;
use ppo_dynamics_cli::run::{run_dir, run_experiment, METRICS_FILE, SUMMARY_FILE};

fn report(n: u32, outcome: Result<String>) {
    let line = match &outcome {
        Ok(detail) => format!("PASS criterion {n}: {detail}\n"),
        Err(e) => format!("FAIL criterion {n}: {e:#}\n"),
    };
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e:#}");
    }
}

fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn normal(r: &mut StreamRng) -> f64 {
    r.sample(StandardNormal)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

// ---------------------------------------------------------------- 1

fn toy_reproduction() -> Result<String> {
    let start = Instant::now();
    let cfg = ToyConfig::default();
    ensure!(
        cfg.lr == 1.5 && cfg.eps == 0.1 && cfg.adv_x == 1.0 && cfg.adv_y == 1.0 && cfg.epochs == 10 && cfg.alpha == 3.0,
        "unexpected toy defaults: {cfg:?}"
    );
    let (pi_x, pi_y) = (cfg.pi_old_x, cfg.pi_old_y);

    let over = toy_simulate(&cfg)?;
    ensure!(over.updates.len() == 20, "{} updates, expected 20", over.updates.len());
    ensure!(over == toy_simulate(&cfg)?, "toy simulation is not deterministic");
    let phi_x = cfg.phi_x();
    let phi_y = cfg.alpha * phi_x;
    let mut prev = (over.initial_p_x, over.initial_p_y);
    let mut peak: f64 = 0.0;
    for u in &over.updates {
        // probabilities follow from the logged parameters
        let px = sigmoid((u.theta1 - u.theta2) * phi_x);
        let py = sigmoid((u.theta1 - u.theta2) * phi_y);
        ensure!((px - u.p_x).abs() < 1e-15 && (py - u.p_y).abs() < 1e-15, "update {}: logged probabilities disagree", u.index);
        ensure!(u.p_x >= prev.0 && u.p_y >= prev.1, "update {}: a probability decreased", u.index);
        prev = (u.p_x, u.p_y);
        peak = peak.max(u.p_x / (pi_x * (1.0 + cfg.eps))).max(u.p_y / (pi_y * (1.0 + cfg.eps)));
    }
    ensure!(peak > 1.0, "no probability exceeded π_old·(1+ε)");
    let last = over.updates.last().expect("updates");

    let icfg = ToyConfig { alpha: -1.0, ..cfg.clone() };
    let inter = toy_simulate(&icfg)?;
    let il = inter.updates.last().expect("updates");
    ensure!(
        il.p_x < inter.initial_p_x || il.p_y < inter.initial_p_y,
        "α=−1: final ({}, {}) not below the initial probabilities",
        il.p_x,
        il.p_y
    );
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 1.0, "toy runs took {elapsed:.3}s");
    Ok(format!(
        "α=3 final p=({:.4}, {:.4}) non-decreasing, max p/(π_old(1+ε))={peak:.4}; α=−1 final p=({:.4}, {:.4}); {:.1} ms",
        last.p_x,
        last.p_y,
        il.p_x,
        il.p_y,
        elapsed * 1e3
    ))
}

#[test]
fn criterion_01_toy_model() {
    report(1, toy_reproduction());
}

// ---------------------------------------------------------------- 2

fn toy_equivalence() -> Result<String> {
    let mut r = rng(2);
    let (mut worst, mut gated) = (0.0f64, 0);
    for _ in 0..100 {
        let cfg = ToyConfig {
            phi_x: Some(r.random_range(-2.0..2.0)),
            alpha: r.random_range(-3.0..3.0),
            ..Default::default()
        };
        let theta = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let s = if r.random_bool(0.5) { ToyState::X } else { ToyState::Y };
        let pi_old = r.random_range(0.2..0.8);
        let (analytic, applied) = toy_step(theta, s, pi_old, &cfg);
        let auto = toy_autodiff_step(theta, s, pi_old, &cfg)?;
        if !applied {
            gated += 1;
        }
        worst = worst.max((analytic[0] - auto[0]).abs()).max((analytic[1] - auto[1]).abs());
    }
    ensure!(worst < 1e-12, "max |Δ| = {worst:e}");
    Ok(format!("100 draws ({gated} past the clip), max |Δ| = {worst:.2e}"))
}

#[test]
fn criterion_02_toy_autodiff_equivalence() {
    report(2, toy_equivalence());
}

// ---------------------------------------------------------------- 3

fn spec_for(kind: EnvKind, widths: Vec<usize>, activation: Activation) -> (MlpSpec, MlpSpec) {
    let mut cfg = TrainConfig::defaults(kind);
    cfg.network.hidden_widths = widths;
    cfg.network.activation = activation;
    (cfg.actor_spec(), cfg.critic_spec())
}

fn small_batch(agent: &Agent, kind: EnvKind, seed: u64, n_envs: usize, steps: usize) -> Result<RolloutBatch> {
    let streams = RngStreams::new(seed);
    let mut c = Collector::new(&EnvConfig::defaults(kind), n_envs, None, &streams, Execution::Sequential)?;
    Ok(c.collect(agent, steps, &GaeConfig::default())?)
}

/// Values of `[clip, entropy, value, pfo, total]` for the whole batch.
fn loss_terms(agent: &Agent, batch: &RolloutBatch, cfg: &PpoConfig) -> Result<(Graph, ParameterSet, [ppo_dynamics::autodiff::Var; 5])> {
    let mut g = Graph::with_execution(Execution::Sequential);
    let mut ps = ParameterSet::new();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let n = total_loss(&mut g, &mut ps, agent, batch, &idx, cfg)?;
    let pfo = n.pfo.ok_or_else(|| anyhow!("pfo term missing"))?;
    Ok((g, ps, [n.clip_objective, n.entropy, n.value_loss, pfo, n.total]))
}

fn gradient_oracle() -> Result<String> {
    const NAMES: [&str; 5] = ["clip", "entropy", "value", "pfo", "total"];
    const H: f64 = 1e-6;
    let mut r = rng(3);
    let mut worst = [0.0f64; 5];
    let mut n_params = 0usize;
    for case in 0..50u64 {
        let kind = if case % 2 == 0 { EnvKind::ChainDense } else { EnvKind::PointMass };
        let activation = if (case / 2) % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let widths = vec![r.random_range(3..=8), r.random_range(3..=8)];
        let (a_spec, c_spec) = spec_for(kind, widths, activation);
        let shared = case % 5 == 0;
        let mut agent = Agent::new(&a_spec, &c_spec, shared, 100 + case)?;
        let flat: Vec<f64> = agent.flat().iter().map(|p| p + 0.2 * normal(&mut r)).collect();
        agent.set_flat(&flat)?;

        let mut batch = small_batch(&agent, kind, case, 2, 8)?;
        // move away from θ_old so every term has a non-trivial gradient
        for lp in &mut batch.old_log_probs {
            *lp += 0.3 * normal(&mut r);
        }
        for m in &mut batch.old_preacts {
            for v in m.data_mut() {
                *v += 0.5 * normal(&mut r);
            }
        }
        for (a, (ret, v)) in batch.advantages.iter_mut().zip(batch.returns.iter_mut().zip(&batch.values)) {
            *a = normal(&mut r);
            *ret = v + normal(&mut r);
        }
        let mut cfg = if kind.is_discrete() { PpoConfig::discrete_defaults() } else { PpoConfig::continuous_defaults() };
        cfg.pfo_scope = if case % 3 == 0 { PfoScope::Last } else { PfoScope::All };
        cfg.entropy_coeff = 0.01;

        let mut analytic = Vec::new();
        for t in 0..5 {
            let (mut g, ps, terms) = loss_terms(&agent, &batch, &cfg)?;
            g.backward(terms[t])?;
            analytic.push(ps.flat_gradient(&g));
        }
        let eval = |p: &[f64]| -> Result<[f64; 5]> {
            let mut a = agent.clone();
            a.set_flat(p)?;
            let (g, _, terms) = loss_terms(&a, &batch, &cfg)?;
            Ok(terms.map(|v| g.value(v).get(0, 0)))
        };
        let mut p = flat.clone();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + H;
            let up = eval(&p)?;
            p[i] = orig - H;
            let down = eval(&p)?;
            p[i] = orig;
            for t in 0..5 {
                let fd = (up[t] - down[t]) / (2.0 * H);
                worst[t] = worst[t].max(rel_err(analytic[t][i], fd));
            }
        }
        n_params += flat.len();
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let detail: Vec<String> = NAMES.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    ensure!(max < 1e-5, "max relative error {max:e} ({})", detail.join(", "));
    Ok(format!("50 networks, {n_params} parameters; max relative error {}", detail.join(", ")))
}

#[test]
fn criterion_03_gradient_oracle() {
    report(3, gradient_oracle());
}

// ---------------------------------------------------------------- 4

/// GAE as the λ-weighted mixture of explicit n-step advantages. Within a
/// segment of `L` remaining steps the weights are `(1−λ)λⁿ⁻¹` for `n < L`
/// and `λᴸ⁻¹` for the longest estimator.
fn gae_oracle(r: &[f64], v: &[f64], boot: f64, term: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let end = (t..n).find(|&e| term[e]).unwrap_or(n - 1);
            let terminal = term[end];
            let l = end - t + 1;
            let mut disc_sum = 0.0;
            let mut total = 0.0;
            for k in 1..=l {
                disc_sum += gamma.powi(k as i32 - 1) * r[t + k - 1];
                let tail = if k < l {
                    gamma.powi(k as i32) * v[t + k]
                } else if terminal {
                    0.0
                } else {
                    gamma.powi(k as i32) * boot
                };
                let a_k = disc_sum + tail - v[t];
                let w = if k < l { (1.0 - lambda) * lambda.powi(k as i32 - 1) } else { lambda.powi(k as i32 - 1) };
                total += w * a_k;
            }
            total
        })
        .collect()
}

fn gae_check() -> Result<String> {
    let mut rg = rng(4);
    let mut worst = 0.0f64;
    let mut terminations = 0;
    for _ in 0..1000 {
        let r: Vec<f64> = (0..50).map(|_| normal(&mut rg)).collect();
        let v: Vec<f64> = (0..50).map(|_| normal(&mut rg)).collect();
        let term: Vec<bool> = (0..50).map(|_| rg.random_bool(0.05)).collect();
        terminations += term.iter().filter(|&&d| d).count();
        let boot = normal(&mut rg);
        let cfg = GaeConfig {
            gamma: rg.random_range(0.9..=1.0),
            lambda: rg.random_range(0.0..=1.0),
        };
        let (adv, ret) = compute_gae(&r, &v, boot, &term, &cfg)?;
        for (t, o) in gae_oracle(&r, &v, boot, &term, cfg.gamma, cfg.lambda).iter().enumerate() {
            worst = worst.max((adv[t] - o).abs());
            ensure!(ret[t] == adv[t] + v[t], "returns != advantages + values at {t}");
        }
    }
    ensure!(worst < 1e-12, "max abs error {worst:e}");

    // λ = 0: the one-step TD error, bit for bit
    for _ in 0..100 {
        let r: Vec<f64> = (0..50).map(|_| normal(&mut rg)).collect();
        let v: Vec<f64> = (0..50).map(|_| normal(&mut rg)).collect();
        let term: Vec<bool> = (0..50).map(|_| rg.random_bool(0.1)).collect();
        let boot = normal(&mut rg);
        let gamma = rg.random_range(0.5..=1.0);
        let (adv, _) = compute_gae(&r, &v, boot, &term, &GaeConfig { gamma, lambda: 0.0 })?;
        for t in 0..50 {
            let next = if t + 1 < 50 { v[t + 1] } else { boot };
            let live = if term[t] { 0.0 } else { 1.0 };
            ensure!(adv[t] == r[t] + gamma * next * live - v[t], "λ=0 mismatch at {t}");
        }
    }
    // λ = 1, γ = 1: Monte-Carlo return minus value, exact on dyadic data
    for _ in 0..100 {
        let r: Vec<f64> = (0..50).map(|_| rg.random_range(-64..=64) as f64 / 8.0).collect();
        let v: Vec<f64> = (0..50).map(|_| rg.random_range(-64..=64) as f64 / 8.0).collect();
        let term: Vec<bool> = (0..50).map(|_| rg.random_bool(0.1)).collect();
        let boot = rg.random_range(-64..=64) as f64 / 8.0;
        let (adv, _) = compute_gae(&r, &v, boot, &term, &GaeConfig { gamma: 1.0, lambda: 1.0 })?;
        for t in 0..50 {
            let end = (t..50).find(|&e| term[e]);
            let mc: f64 = match end {
                Some(e) => r[t..=e].iter().sum(),
                None => r[t..].iter().sum::<f64>() + boot,
            };
            ensure!(adv[t] == mc - v[t], "λ=γ=1 mismatch at {t}");
        }
    }
    Ok(format!(
        "1000 sequences × 50 steps ({terminations} terminations), max abs error {worst:.2e}; λ=0 and λ=γ=1 closed forms exact"
    ))
}

#[test]
fn criterion_04_gae_oracle() {
    report(4, gae_check());
}

// ---------------------------------------------------------------- 5

/// Number of eigenvalues of symmetric `a` below `x`: the negative pivots of
/// an LDLᵀ factorization of `a − xI` (Sylvester's law of inertia).
fn count_below(a: &[Vec<f64>], x: f64) -> usize {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= x;
    }
    let mut neg = 0;
    for k in 0..n {
        let mut d = m[k][k];
        if d == 0.0 {
            d = -f64::MIN_POSITIVE;
        }
        if d < 0.0 {
            neg += 1;
        }
        for i in k + 1..n {
            let l = m[i][k] / d;
            for j in k + 1..n {
                m[i][j] -= l * m[k][j];
            }
        }
    }
    neg
}

/// Descending eigenvalues by bisection on the inertia count.
fn bisection_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let bound: f64 = a.iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        // k-th smallest eigenvalue: smallest x with count_below(x) > k
        let (mut lo, mut hi) = (-bound - 1.0, bound + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if count_below(a, mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    out.reverse();
    out
}

fn matrix_with_spectrum(sigma: &[f64], n: usize, seed: u64) -> Matrix {
    let u = orthogonal_matrix(n, sigma.len(), 1.0, &mut rng(seed));
    let mut phi = Matrix::zeros(n, sigma.len());
    for i in 0..n {
        for (j, s) in sigma.iter().enumerate() {
            phi.set(i, j, u.get(i, j) * s);
        }
    }
    phi
}

fn rank_fixtures() -> Result<String> {
    // constructed spectra: (σ, effective, approximate, srank, abs, eps)
    let h = |p: &[f64]| -> f64 { (-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()).exp() };
    let fixtures: Vec<(Vec<f64>, f64, usize, usize, usize, usize)> = vec![
        (vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0, 1, 1, 1, 1),
        (vec![2.0; 8], 8.0, 8, 8, 8, 8),
        (vec![10.0, 1.0], h(&[10.0 / 11.0, 1.0 / 11.0]), 1, 2, 2, 2),
    ];
    for (k, (sigma, eff, approx, srank, abs, eps)) in fixtures.iter().enumerate() {
        let from_sigma = rank_report_from_singular_values(sigma, 50, RANK_DELTA, FEATURE_RANK_DELTA);
        let from_matrix = rank_report(&matrix_with_spectrum(sigma, 50, k as u64), RANK_DELTA, FEATURE_RANK_DELTA)?;
        for rep in [&from_sigma, &from_matrix] {
            ensure!((rep.effective_rank - eff).abs() < 1e-9, "fixture {k}: effective {} vs {eff}", rep.effective_rank);
            let got = (rep.approximate_rank, rep.srank, rep.feature_rank_abs, rep.epsilon_rank);
            ensure!(got == (*approx, *srank, *abs, *eps), "fixture {k}: got {got:?}");
        }
    }

    // Gram–Jacobi singular values against bisection on the Gram matrix
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let scales: Vec<f64> = (0..8).map(|_| r.random_range(0.1..1.0)).collect();
        let data: Vec<f64> = (0..50 * 8).map(|i| normal(&mut r) * scales[i % 8]).collect();
        let phi = Matrix::from_vec(50, 8, data)?;
        let gram: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| (0..50).map(|k| phi.get(k, i) * phi.get(k, j)).sum()).collect())
            .collect();
        let oracle: Vec<f64> = bisection_eigenvalues(&gram).into_iter().map(|l| l.max(0.0).sqrt()).collect();
        let got = singular_values(&phi)?;
        for (a, b) in got.iter().zip(&oracle) {
            worst = worst.max((a - b).abs() / b);
        }
    }
    ensure!(worst < 1e-8, "singular values: max relative error {worst:e}");

    // scaling Φ → cΦ
    let data: Vec<f64> = (0..50 * 8).map(|i| normal(&mut r) * (1.0 + (i % 8) as f64)).collect();
    let phi = Matrix::from_vec(50, 8, data)?;
    let base = rank_report(&phi, RANK_DELTA, FEATURE_RANK_DELTA)?;
    let mut abs_changed = false;
    let mut eps_changed = false;
    for c in [1e-4, 0.37, 8.0, 1e3] {
        let s = rank_report(&phi.scale(c), RANK_DELTA, FEATURE_RANK_DELTA)?;
        ensure!(
            (s.effective_rank - base.effective_rank).abs() < 1e-12 * base.effective_rank
                && s.approximate_rank == base.approximate_rank
                && s.srank == base.srank,
            "relative metrics changed under scaling by {c}"
        );
        abs_changed |= s.feature_rank_abs != base.feature_rank_abs;
        eps_changed |= s.epsilon_rank != base.epsilon_rank;
    }
    ensure!(abs_changed, "feature_rank_abs did not respond to scaling");
    // σᵢ/(σ₁·N) is a ratio of singular values, so this one cannot move
    ensure!(!eps_changed, "epsilon_rank changed under scaling");
    Ok(format!(
        "3 spectra exact; singular values max rel error {worst:.1e} over 100 matrices; \
         effective/approximate/srank scale-invariant, feature_rank_abs scale-dependent; \
         deviation: epsilon_rank thresholds σᵢ/(σ₁·N) and is scale-invariant by construction"
    ))
}

#[test]
fn criterion_05_rank_metrics() {
    report(5, rank_fixtures());
}

// ---------------------------------------------------------------- 6

fn surrogate_grad(ratio: f64, adv: f64, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.parameter(Matrix::column_vector(&[ratio]));
    let s = g.clipped_surrogate(r, &[adv], eps)?;
    g.backward(s)?;
    Ok(g.grad(r).map_or(0.0, |m| m.get(0, 0)))
}

fn clipping_contract() -> Result<String> {
    let mut rg = rng(6);
    let mut checked = 0;
    let mut flat = 0;
    for eps in [0.1, 0.2, 0.3] {
        let edges = [1.0 - eps, 1.0 + eps];
        let mut ratios: Vec<f64> = edges
            .iter()
            .flat_map(|&e: &f64| [e, f64::from_bits(e.to_bits() - 1), f64::from_bits(e.to_bits() + 1)])
            .collect();
        ratios.extend([1.0, 0.0, 5.0]);
        ratios.extend((0..500).map(|_| rg.random_range(0.3..1.7)));
        for &rho in &ratios {
            for adv in [-2.5, -1e-3, 1e-3, 0.7, rg.random_range(-3.0..3.0)] {
                if adv == 0.0 {
                    continue;
                }
                let grad = surrogate_grad(rho, adv, eps)?;
                let expect_flat = (adv > 0.0 && rho >= 1.0 + eps) || (adv < 0.0 && rho <= 1.0 - eps);
                ensure!(
                    (grad == 0.0) == expect_flat,
                    "ρ={rho:?} Ψ={adv} ε={eps}: gradient {grad}"
                );
                if !expect_flat {
                    ensure!(grad == adv, "ρ={rho:?} Ψ={adv}: unclipped gradient {grad} != Ψ");
                } else {
                    flat += 1;
                }
                checked += 1;
            }
        }
    }

    // ratio exactly one at the start of every rollout's first epoch
    let mut rollouts = 0;
    let mut samples = 0;
    for (kind, shared) in [(EnvKind::ChainDense, false), (EnvKind::ChainDense, true), (EnvKind::PointMass, false)] {
        let cfg = TrainConfig::defaults(kind);
        let mut agent = Agent::new(&cfg.actor_spec(), &cfg.critic_spec(), shared, 60)?;
        let streams = RngStreams::new(61);
        let mut collector = Collector::new(&cfg.env, 4, None, &streams, Execution::default())?;
        let ppo = PpoConfig { minibatch_size: 32, ..cfg.ppo.clone() };
        for _ in 0..5 {
            let batch = collector.collect(&agent, 32, &cfg.ppo.gae)?;
            ensure!(batch_ratios(&agent, &batch)?.iter().all(|&x| x == 1.0), "full-batch ratio != 1");
            let mut order: Vec<usize> = (0..batch.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rg);
            for mb in order.chunks(ppo.minibatch_size) {
                let mut g = Graph::new();
                let mut ps = ParameterSet::new();
                let nodes = total_loss(&mut g, &mut ps, &agent, &batch, mb, &ppo)?;
                for (k, &i) in mb.iter().enumerate() {
                    let ratio = (g.value(nodes.new_log_probs).get(k, 0) - batch.old_log_probs[i]).exp();
                    ensure!(ratio == 1.0, "minibatch ratio {ratio} at row {i}");
                    samples += 1;
                }
            }
            rollouts += 1;
            // stand-in for an optimization phase
            let flat: Vec<f64> = agent.flat().iter().map(|p| p + 0.05 * normal(&mut rg)).collect();
            agent.set_flat(&flat)?;
        }
    }
    Ok(format!(
        "{checked} (ρ, Ψ) cases incl. exact and adjacent boundaries ({flat} flat); ratio == 1 on {samples} samples over {rollouts} rollouts"
    ))
}

#[test]
fn criterion_06_clipping_contract() {
    report(6, clipping_contract());
}

// ---------------------------------------------------------------- 7

fn pfo_value(agent: &Agent, batch: &RolloutBatch, scope: PfoScope) -> Result<f64> {
    let cfg = PpoConfig {
        pfo_scope: scope,
        ..PpoConfig::discrete_defaults()
    };
    let mut g = Graph::new();
    let mut ps = ParameterSet::new();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let nodes = total_loss(&mut g, &mut ps, agent, batch, &idx, &cfg)?;
    Ok(g.value(nodes.pfo.expect("scope on")).get(0, 0))
}

fn pfo_contract() -> Result<String> {
    let hs = [1e-3, 1e-2, 1e-1];
    let mut rg = rng(7);
    let mut min_r2 = f64::INFINITY;
    let mut cases = 0;
    for (kind, act) in [(EnvKind::ChainDense, Activation::Relu), (EnvKind::PointMass, Activation::Tanh)] {
        let (a_spec, c_spec) = spec_for(kind, vec![16, 16, 16], act);
        for seed in 0..5u64 {
            let agent = Agent::new(&a_spec, &c_spec, seed % 2 == 1, 70 + seed)?;
            let batch = small_batch(&agent, kind, seed, 4, 32)?;
            for scope in [PfoScope::Last, PfoScope::All] {
                let cfg = PpoConfig { pfo_scope: scope, ..PpoConfig::discrete_defaults() };
                let mut g = Graph::new();
                let mut ps = ParameterSet::new();
                let idx: Vec<usize> = (0..batch.len()).collect();
                let nodes = total_loss(&mut g, &mut ps, &agent, &batch, &idx, &cfg)?;
                let pfo = nodes.pfo.expect("scope on");
                ensure!(g.value(pfo).get(0, 0) == 0.0, "PFO at θ_old is {}", g.value(pfo).get(0, 0));
                g.backward(pfo)?;
                ensure!(ps.flat_gradient(&g).iter().all(|&x| x == 0.0), "PFO gradient at θ_old is not zero");
            }
            for _ in 0..4 {
                let dir: Vec<f64> = (0..agent.param_count()).map(|_| normal(&mut rg)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut ys = Vec::new();
                for &h in &hs {
                    let mut moved = agent.clone();
                    let flat: Vec<f64> = agent.flat().iter().zip(&dir).map(|(p, d)| p + h * d / norm).collect();
                    moved.set_flat(&flat)?;
                    let last = pfo_value(&moved, &batch, PfoScope::Last)?;
                    let all = pfo_value(&moved, &batch, PfoScope::All)?;
                    ensure!(all >= last, "h={h}: all {all} < last {last}");
                    ys.push(all);
                }
                // least-squares fit y = a·h² through the origin
                let a = ys.iter().zip(&hs).map(|(y, h)| y * h * h).sum::<f64>() / hs.iter().map(|h| h.powi(4)).sum::<f64>();
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                let ss_res: f64 = ys.iter().zip(&hs).map(|(y, h)| (y - a * h * h).powi(2)).sum();
                let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
                let r2 = 1.0 - ss_res / ss_tot;
                ensure!(r2 > 0.999, "quadratic fit R² = {r2}");
                min_r2 = min_r2.min(r2);
                cases += 1;
            }
        }
    }
    Ok(format!("zero value and gradient at θ_old; {cases} perturbation directions, min R² = {min_r2:.6}; all ≥ last everywhere"))
}

#[test]
fn criterion_07_pfo_contract() {
    report(7, pfo_contract());
}

// ---------------------------------------------------------------- 8

fn collapse(agent: &mut Agent) {
    for net in [&mut agent.actor, &mut agent.critic] {
        if let Some(layer) = net.hidden.last_mut() {
            layer.weight.data_mut().fill(0.0);
            layer.bias.data_mut().fill(-1.0);
        }
    }
}

fn capacity_protocol() -> Result<String> {
    let mut lines = Vec::new();
    for kind in [EnvKind::ChainDense, EnvKind::PointMass] {
        let cfg = TrainConfig::defaults(kind);
        let mut wins = 0;
        let mut self_fit = 0.0f64;
        for seed in 0..5u64 {
            let streams = RngStreams::new(seed);
            let norm = run_normalizer(&cfg, &streams)?;
            let probe = run_capacity_probe(&cfg, &streams, norm.as_ref())?;
            for head in [CapacityHead::Actor, CapacityHead::Critic] {
                self_fit = self_fit.max(capacity_loss(&probe.target, &probe, head)?.abs());
            }
            let fresh = Agent::new(&cfg.actor_spec(), &cfg.critic_spec(), false, 800 + seed)?;
            let mut collapsed = fresh.clone();
            collapse(&mut collapsed);
            let (_, feats) = actor_forward(&collapsed.actor, &probe.observations)?;
            let width = cfg.actor_spec().penultimate_width();
            ensure!(dead_neurons(feats.features(), cfg.network.activation)? == width, "collapsed actor has live units");
            let mut ok = true;
            for head in [CapacityHead::Actor, CapacityHead::Critic] {
                let f = capacity_loss(&fresh, &probe, head)?;
                let c = capacity_loss(&collapsed, &probe, head)?;
                ok &= c > f;
                if c <= f {
                    lines.push(format!("{kind:?} seed {seed} {head:?}: collapsed {c:e} <= fresh {f:e}"));
                }
            }
            wins += ok as usize;
        }
        ensure!(self_fit < 1e-8, "{kind:?}: self-fit loss {self_fit:e}");
        ensure!(wins == 5, "{kind:?}: collapsed lost on only {wins}/5 seeds: {}", lines.join("; "));
        lines.push(format!("{kind:?} self-fit ≤ {self_fit:.1e}, collapsed worse on 5/5 seeds (both heads)"));
    }
    Ok(lines.join("; "))
}

#[test]
fn criterion_08_capacity_protocol() {
    report(8, capacity_protocol());
}

// ---------------------------------------------------------------- 9

fn diagnostics_arithmetic() -> Result<String> {
    // dead units on a hand-built network
    let spec = MlpSpec {
        input_dim: 2,
        hidden_widths: vec![3, 4],
        activation: Activation::Relu,
        head: HeadKind::Categorical { n_actions: 2 },
    };
    let mut net = init_mlp(&spec, 0)?;
    net.hidden[0].weight = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]])?;
    net.hidden[0].bias = Matrix::zeros(1, 3);
    // unit 0: zero weights, negative bias; unit 1: zero everything;
    // unit 2: negative weights on positive inputs; unit 3: alive
    net.hidden[1].weight = Matrix::from_rows(&[
        vec![0.0, 0.0, -1.0, 1.0],
        vec![0.0, 0.0, -1.0, 0.5],
        vec![0.0, 0.0, -2.0, 0.0],
    ])?;
    net.hidden[1].bias = Matrix::from_rows(&[vec![-1.0, 0.0, 0.0, 0.0]])?;
    let obs = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.5, 0.5]])?;
    let (dist, probe) = actor_forward(&net, &obs)?;
    ensure!(dead_neurons(probe.features(), Activation::Relu)? == 3, "relu dead count");
    ensure!(!dist.rows_identical(), "one live unit should keep rows distinct");

    let mut tnet = net.clone();
    tnet.spec.activation = Activation::Tanh;
    // zero weights → constant; tiny weights → std below 1e-3; two live
    tnet.hidden[1].weight = Matrix::from_rows(&[
        vec![0.0, 1e-6, 1.0, -1.0],
        vec![0.0, 1e-6, 0.0, 1.0],
        vec![0.0, 1e-6, 0.0, 0.0],
    ])?;
    let (_, probe) = actor_forward(&tnet, &obs)?;
    ensure!(dead_neurons(probe.features(), Activation::Tanh)? == 2, "tanh dead count");

    // excess ratio
    let r = [1.3, 1.5, 0.8, 0.6, 1.0, 1.2];
    ensure!(excess_ratio(&r, 0.2, false) == Some(((1.3 + 1.5) / 2.0) / 0.6), "excess ratio hand case");
    ensure!(excess_ratio(&[1.3, 0.9, 1.0], 0.2, false).is_none(), "no ratio below: should be absent");
    ensure!(excess_ratio(&[0.5, 1.0], 0.2, false).is_none(), "no ratio above: should be absent");
    let s = ratio_stats(&[2e12, 0.5, 1.0], 0.2, true);
    ensure!(s.mean_above == Some(1e12) && s.excess_ratio == Some(2e12), "continuous clamp: {s:?}");
    ensure!(ratio_stats(&[2e12, 0.5], 0.2, false).excess_ratio == Some(4e12), "discrete ratios are not clamped");

    // window_aggregate: 30 logging steps of 100, run length 3000, 5% window = 150 steps
    let series: Vec<(u64, Option<f64>)> =
        (1..=30u64).map(|k| (k * 100, (k <= 15).then_some(k as f64))).collect();
    ensure!(
        window_aggregate(&series, 3000, 0.05, WindowMode::LastNontrivialRatio) == Some((14.0 + 15.0) / 2.0),
        "last non-trivial window should average steps 1400 and 1500"
    );
    ensure!(window_aggregate(&series, 3000, 0.05, WindowMode::Tail).is_none(), "tail window holds only absent values");
    let nine: Vec<(u64, Option<f64>)> = (1..=30u64).map(|k| (k * 100, (k <= 9).then_some(1.0))).collect();
    ensure!(
        window_aggregate(&nine, 3000, 0.05, WindowMode::LastNontrivialRatio).is_none(),
        "nine non-trivial ratios are not enough"
    );
    let ten: Vec<(u64, Option<f64>)> = (1..=30u64).map(|k| (k * 100, (k % 3 == 0).then_some(k as f64))).collect();
    ensure!(
        window_aggregate(&ten, 3000, 0.05, WindowMode::LastNontrivialRatio) == Some(30.0),
        "ten non-trivial ratios end the window at step 3000"
    );
    let full: Vec<(u64, Option<f64>)> = (1..=30u64).map(|k| (k * 100, Some(k as f64))).collect();
    ensure!(window_aggregate(&full, 3000, 0.05, WindowMode::Tail) == Some(29.5), "tail window");

    // EWMA closed forms; dyadic coefficients over 12 steps keep every
    // intermediate value representable, so the recursion is exact
    for c in [0.5, 0.25, 0.125] {
        let step: Vec<f64> = std::iter::once(0.0).chain(std::iter::repeat_n(1.0, 12)).collect();
        let s = ewma_smooth(&step, c)?;
        for (t, v) in s.iter().enumerate() {
            ensure!(*v == 1.0 - (1.0 - c).powi(t as i32), "step response c={c} t={t}: {v}");
        }
        let impulse = ewma_smooth(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], c)?;
        ensure!(impulse.iter().enumerate().all(|(t, v)| *v == (1.0 - c).powi(t as i32)), "impulse response c={c}");
        ensure!(ewma_smooth(&[3.0; 10], c)?.iter().all(|&v| v == 3.0), "constant series c={c}");
    }
    let x = [1.0, -2.0, 7.5, 0.25];
    ensure!(ewma_smooth(&x, 1.0)? == x.to_vec(), "coefficient 1 is the identity");

    // correlation hand cases
    let (a, b) = ([1.0, 2.0, 3.0, 4.0, 5.0], [3.0, 1.0, 2.0, 5.0, 4.0]);
    ensure!(kendall_tau(&a, &b) == Some(0.4), "kendall: 7 concordant, 3 discordant");
    ensure!(spearman(&a, &b) == Some(0.6), "spearman: Σd² = 8");
    ensure!(pearson(&a, &b) == Some(0.6), "pearson");
    ensure!(kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]) == Some(2.0 / 6f64.sqrt()), "kendall τ-b with a tie");
    // average ranks (1.5, 1.5, 3) against (1, 2, 3)
    let rho = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).ok_or_else(|| anyhow!("spearman with ties"))?;
    ensure!(rho == 1.5 / 3f64.sqrt(), "spearman with ties: {rho}");
    ensure!(kendall_tau(&[1.0; 3], &a[..3]).is_none(), "constant input");
    ensure!(normalized_l2(&[0.0; 4], &[3.0, 4.0, 0.0, 0.0], 5)? == 0.5, "normalized L2");
    Ok("dead units (relu 3/4, tanh 2/4), excess ratio, both window rules, EWMA, Kendall/Spearman/Pearson/L2 hand cases exact".into())
}

#[test]
fn criterion_09_diagnostics_arithmetic() {
    report(9, diagnostics_arithmetic());
}

// ---------------------------------------------------------------- 10, 11

/// Mean of a record field over steps in `(0.95·run_length, run_length]`.
fn tail_mean(records: &[DiagnosticsRecord], run_length: u64, f: impl Fn(&DiagnosticsRecord) -> Option<f64>) -> Option<f64> {
    let lower = 0.95 * run_length as f64;
    let vals: Vec<f64> = records.iter().filter(|r| r.step as f64 > lower).filter_map(&f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn run_records(cfg: &TrainConfig) -> Result<Vec<DiagnosticsRecord>> {
    let mut records = Vec::new();
    train(cfg, &mut |ev| {
        if let TrainEvent::Record(r) = ev {
            records.push(r.clone());
        }
        Ok(())
    })?;
    Ok(records)
}

fn end_to_end() -> Result<String> {
    let base = TrainConfig::defaults(EnvKind::ChainDense);
    ensure!(base.ppo.epochs == 4, "default K is {}", base.ppo.epochs);
    let optimum = solve_grid(&base.env)?.optimal_return();
    let mut parts = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        // capacity probes draw from their own streams; training is unaffected
        cfg.diagnostics.capacity_fraction = 0.0;
        let start = Instant::now();
        let records = run_records(&cfg)?;
        let secs = start.elapsed().as_secs_f64();
        let run_length = cfg.n_batches() * cfg.batch_size() as u64;
        let ret = tail_mean(&records, run_length, |r| r.episode_return_mean)
            .ok_or_else(|| anyhow!("seed {seed}: no finished episodes in the tail window"))?;
        ensure!(secs < 120.0, "seed {seed} took {secs:.1}s");
        ensure!(ret >= 0.9 * optimum, "seed {seed}: tail return {ret:.4} < 0.9 × {optimum:.4}");
        parts.push(format!("{ret:.3} ({secs:.1}s)"));
    }
    Ok(format!("DP optimum {optimum:.4}, threshold {:.4}; tail returns {}", 0.9 * optimum, parts.join(", ")))
}

#[test]
fn criterion_10_end_to_end_learning() {
    report(10, end_to_end());
}

fn direction_of_effect() -> Result<String> {
    let mut base = TrainConfig::defaults(EnvKind::ChainDense);
    base.total_steps = 30_000;
    base.diagnostics.capacity_fraction = 0.0;
    let preact = |k: usize, pfo: bool, seed: u64| -> Result<f64> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.ppo.epochs = k;
        if pfo {
            cfg.ppo.pfo_scope = PfoScope::Last;
        }
        let records = run_records(&cfg)?;
        let run_length = cfg.n_batches() * cfg.batch_size() as u64;
        tail_mean(&records, run_length, |r| Some(r.actor.preactivation_norm)).ok_or_else(|| anyhow!("no records"))
    };
    let (mut k_wins, mut pfo_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let k1 = preact(1, false, seed)?;
        let k32 = preact(32, false, seed)?;
        let k32_pfo = preact(32, true, seed)?;
        k_wins += (k32 > k1) as usize;
        pfo_wins += (k32_pfo < k32) as usize;
        rows.push(format!("s{seed}: {k1:.2}/{k32:.2}/{k32_pfo:.2}"));
    }
    let detail = format!(
        "pre-activation norm K=1/K=32/K=32+PFO {}; K=32 higher {k_wins}/5, PFO lower {pfo_wins}/5",
        rows.join(", ")
    );
    if k_wins < 4 || pfo_wins < 4 {
        bail!("{detail}");
    }
    Ok(detail)
}

#[test]
fn criterion_11_direction_of_effect() {
    report(11, direction_of_effect());
}

// ---------------------------------------------------------------- 12

fn flatten(v: &serde_json::Value, prefix: &str, out: &mut BTreeMap<String, Option<f64>>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key, out);
            }
        }
        serde_json::Value::Number(n) => {
            out.insert(prefix.to_string(), n.as_f64());
        }
        serde_json::Value::Null => {
            out.insert(prefix.to_string(), None);
        }
        _ => {}
    }
}

/// Recomputes the summary of a run from its raw metrics lines.
fn independent_summary(metrics: &Path, run_length: u64) -> Result<(BTreeMap<String, Option<f64>>, Option<f64>)> {
    let rows: Vec<BTreeMap<String, Option<f64>>> = std::fs::read_to_string(metrics)?
        .lines()
        .map(|l| {
            let mut m = BTreeMap::new();
            flatten(&serde_json::from_str(l)?, "", &mut m);
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let step = |m: &BTreeMap<String, Option<f64>>| m["step"].expect("step");
    let width = 0.05 * run_length as f64;
    let mean_in = |key: &str, lo: f64, hi: f64| -> Option<f64> {
        let v: Vec<f64> = rows
            .iter()
            .filter(|m| step(m) > lo && step(m) <= hi)
            .filter_map(|m| m.get(key).copied().flatten())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let keys: std::collections::BTreeSet<String> = rows.iter().flat_map(|m| m.keys().cloned()).collect();
    let tail = keys
        .iter()
        .filter(|k| *k != "step" && *k != "batch")
        .map(|k| (k.clone(), mean_in(k, run_length as f64 - width, run_length as f64)))
        .collect();
    let present: Vec<f64> = rows
        .iter()
        .filter(|m| m.get("ratio.excess_ratio").copied().flatten().is_some())
        .map(step)
        .collect();
    let excess = if present.len() >= 10 {
        let hi = present.iter().copied().fold(f64::MIN, f64::max);
        mean_in("ratio.excess_ratio", hi - width, hi)
    } else {
        None
    };
    Ok((tail, excess))
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
        (None, None) => true,
        _ => false,
    }
}

fn reproducibility() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let config = |out: &Path, seeds: &str, exec: &str| {
        format!(
            "name = \"repro\"\nseeds = {seeds}\noutput_dir = {out:?}\nsave_checkpoints = true\n\
             total_steps = 5120\nn_envs = 2\nsteps_per_env = 64\nexecution = \"{exec}\"\n\
             [ppo]\nminibatch_size = 32\nepochs = 8\n\
             [diagnostics]\ncapacity_fraction = 0.25\ncapacity_dataset_size = 128\ncapacity_epochs = 2\n"
        )
    };
    let mut roots = Vec::new();
    for (name, seeds, exec) in [("a", "[0, 1]", "parallel"), ("b", "[0, 1]", "sequential"), ("c", "[1]", "parallel")] {
        let out = tmp.path().join(name);
        let cfg = RunConfig::from_toml_str(&config(&out, seeds, exec), &[])?;
        for r in run_experiment(&cfg)? {
            r.outcome.map_err(|e| anyhow!("run {name} seed {} failed: {e}", r.entry.seed))?;
        }
        roots.push(out.join("repro"));
    }
    let read = |root: &Path, seed: u64, file: &str| std::fs::read(run_dir(root, "base", seed).join(file));
    let mut lines = 0;
    for seed in [0u64, 1] {
        let a = read(&roots[0], seed, METRICS_FILE)?;
        ensure!(!a.is_empty(), "empty metrics");
        ensure!(a == read(&roots[1], seed, METRICS_FILE)?, "seed {seed}: parallel and sequential metrics differ");
        lines += a.iter().filter(|&&b| b == b'\n').count();
        let ck = |root: &Path| -> Result<Vec<(std::ffi::OsString, Vec<u8>)>> {
            let mut v = Vec::new();
            for e in std::fs::read_dir(run_dir(root, "base", seed).join("checkpoints"))? {
                let e = e?;
                v.push((e.file_name(), std::fs::read(e.path())?));
            }
            v.sort();
            Ok(v)
        };
        let cks = ck(&roots[0])?;
        ensure!(!cks.is_empty() && cks == ck(&roots[1])?, "seed {seed}: checkpoints differ");
    }
    ensure!(read(&roots[0], 1, METRICS_FILE)? == read(&roots[2], 1, METRICS_FILE)?, "single-seed rerun differs");

    let run_length = 5120;
    let mut compared = 0;
    for root in &roots[..2] {
        for seed in [0u64, 1] {
            let dir = run_dir(root, "base", seed);
            let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(SUMMARY_FILE))?)?;
            ensure!(summary["run_length"] == run_length, "run length {}", summary["run_length"]);
            let (tail, excess) = independent_summary(&dir.join(METRICS_FILE), run_length)?;
            let logged = summary["tail"].as_object().ok_or_else(|| anyhow!("summary without tail"))?;
            ensure!(logged.len() == tail.len(), "summary has {} metrics, recomputed {}", logged.len(), tail.len());
            for (k, v) in &tail {
                let got = logged.get(k).ok_or_else(|| anyhow!("summary lacks {k}"))?.as_f64();
                ensure!(close(got, *v), "{k}: summary {got:?} vs recomputed {v:?}");
                compared += 1;
            }
            let got = summary["excess_ratio_last_nontrivial"].as_f64();
            ensure!(close(got, excess), "excess ratio: summary {got:?} vs recomputed {excess:?}");
        }
    }
    Ok(format!(
        "metrics.jsonl ({lines} records) and checkpoints byte-identical across parallel, sequential and single-seed reruns; \
         {compared} summary values recomputed within 1e-12"
    ))
}

#[test]
fn criterion_12_reproducibility() {
    report(12, reproducibility());
}
