//! Exact-enumeration verification on small token MDPs.
//!
//! Everything here walks the full prefix tree of an [`MdpSpec`]; states are
//! `(prompt, full prefix)` so there is no aliasing between histories.

pub mod gradcheck;
pub mod noise;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimators::{self, EstimatorConfig, Mass};
use crate::numerics::l2_norm;
use crate::policy::{
    add_score, realized_tv, EngineConfig, FeatureMap, MismatchSpec, OwnedState, PolicyParams, Scratch, State,
    TrainScorer, Trajectory,
};
use crate::toyenv::{enumerate_trajectories, Environment, MdpSpec, Token};

pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use noise::{verify_appendix_a, AppendixAReport, NoiseModel, ScalingReport};

/// Slack added to exact inequalities to absorb f64 rounding.
pub const BOUND_SLACK: f64 = 1e-12;

/// Every non-terminal prefix state reachable with positive prompt mass.
pub fn reachable_states(spec: &MdpSpec) -> Result<Vec<OwnedState>> {
    // Budget check happens in the enumerator.
    enumerate_trajectories(spec)?;
    let mut out = Vec::new();
    for (prompt, &px) in spec.prompt_distribution().iter().enumerate() {
        if px <= 0.0 {
            continue;
        }
        let mut stack: Vec<Vec<Token>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            if spec.is_terminal(&prefix) && !prefix.is_empty() {
                continue;
            }
            for tok in (0..spec.vocab_size() as Token).rev() {
                let mut next = prefix.clone();
                next.push(tok);
                stack.push(next);
            }
            out.push(OwnedState { prompt: prompt as u32, prefix });
        }
    }
    out.sort();
    Ok(out)
}

/// `Σ_τ P_sampling(τ) · R(τ) · ∇_θ log π_scoring(τ)`, by walking the tree.
///
/// With `sampling = scoring = π` this is the ideal gradient; with
/// `sampling = μ`, `scoring = π` it is the gradient actually computed when
/// rollouts come from the other engine.
pub fn exact_policy_gradient(
    spec: &MdpSpec,
    params: &PolicyParams,
    sampling: &EngineConfig,
    scoring: &EngineConfig,
) -> Result<Vec<f64>> {
    enumerate_trajectories(spec)?;
    let mut grad = vec![0.0; params.param_count()];
    let mut prefix = Vec::with_capacity(spec.max_horizon());
    for (prompt, &px) in spec.prompt_distribution().iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        let score = vec![0.0; params.param_count()];
        descend(spec, params, sampling, scoring, prompt as u32, &mut prefix, px, score, &mut grad)?;
    }
    Ok(grad)
}

#[allow(clippy::too_many_arguments)]
fn descend(
    spec: &MdpSpec,
    params: &PolicyParams,
    sampling: &EngineConfig,
    scoring: &EngineConfig,
    prompt: u32,
    prefix: &mut Vec<Token>,
    mass: f64,
    score: Vec<f64>,
    grad: &mut [f64],
) -> Result<()> {
    let state = State::new(prompt, prefix);
    let q = params.token_distribution(sampling, state)?;
    let mut sc = Scratch::default();
    params.distribution_into(scoring, state, &mut sc)?;
    for (a, &qa) in q.iter().enumerate() {
        let mut child_score = score.clone();
        add_score(params.vocab_size, sc.features(), sc.probs(), a, 1.0, &mut child_score);
        let child_mass = mass * qa;
        prefix.push(a as Token);
        if spec.is_terminal(prefix) {
            let r = spec.reward_of(prompt, prefix) as f64;
            if r != 0.0 {
                for (g, s) in grad.iter_mut().zip(&child_score) {
                    *g += child_mass * r * s;
                }
            }
        } else {
            descend(spec, params, sampling, scoring, prompt, prefix, child_mass, child_score, grad)?;
        }
        prefix.pop();
    }
    Ok(())
}

/// All complete sequences with both engines' log-probabilities, and their
/// exact probability mass `p(x) · μ(y|x)` under the rollout engine.
pub fn enumerated_batch(
    spec: &MdpSpec,
    params: &PolicyParams,
    train: &EngineConfig,
    rollout: &EngineConfig,
) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let mut trajs = Vec::new();
    let mut mass = Vec::new();
    for e in enumerate_trajectories(spec)? {
        let px = spec.prompt_distribution()[e.prompt as usize];
        let logprob_train = params.score_sequence(train, e.prompt, &e.tokens)?;
        let logprob_rollout = params.score_sequence(rollout, e.prompt, &e.tokens)?;
        mass.push(px * logprob_rollout.iter().sum::<f64>().exp());
        trajs.push(Trajectory {
            prompt: e.prompt,
            tokens: e.tokens,
            logprob_train,
            logprob_rollout,
            reward: e.reward,
            truncated: false,
            entropy_sum: 0.0,
        });
    }
    Ok((trajs, mass))
}

/// Exact expectation (over μ-rollouts) of an estimator from the estimator
/// module, with raw binary rewards as the signal.
pub fn exact_estimator_expectation(
    spec: &MdpSpec,
    params: &PolicyParams,
    train: &EngineConfig,
    rollout: &EngineConfig,
    cfg: &EstimatorConfig,
) -> Result<Vec<f64>> {
    let (trajs, mass) = enumerated_batch(spec, params, train, rollout)?;
    let rewards: Vec<f64> = trajs.iter().map(|t| t.reward as f64).collect();
    let scorer = TrainScorer::new(params, *train);
    let (g, _) = estimators::estimate(cfg, &trajs, &rewards, Mass::Weights(&mass), &scorer)?;
    Ok(g.vector)
}

type PrefixKey = (u32, Vec<Token>);

/// `V^μ(s)` for every non-terminal prefix: expected terminal reward when
/// continuing from `s` with the sampling engine.
fn value_table(spec: &MdpSpec, params: &PolicyParams, engine: &EngineConfig) -> Result<BTreeMap<PrefixKey, f64>> {
    fn rec(
        spec: &MdpSpec,
        params: &PolicyParams,
        engine: &EngineConfig,
        prompt: u32,
        prefix: &mut Vec<Token>,
        table: &mut BTreeMap<PrefixKey, f64>,
    ) -> Result<f64> {
        let q = params.token_distribution(engine, State::new(prompt, prefix))?;
        let mut v = 0.0;
        for (a, &qa) in q.iter().enumerate() {
            prefix.push(a as Token);
            let child = if spec.is_terminal(prefix) {
                spec.reward_of(prompt, prefix) as f64
            } else {
                rec(spec, params, engine, prompt, prefix, table)?
            };
            prefix.pop();
            v += qa * child;
        }
        table.insert((prompt, prefix.clone()), v);
        Ok(v)
    }
    let mut table = BTreeMap::new();
    for prompt in 0..spec.prompt_distribution().len() as u32 {
        rec(spec, params, engine, prompt, &mut Vec::new(), &mut table)?;
    }
    Ok(table)
}

/// Both sides of the sequence-to-token conversion identity and their
/// L2 distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub sequence_side: Vec<f64>,
    pub occupancy_side: Vec<f64>,
    pub residual: f64,
}

/// Sequence side: `E_{x, y~μ}[R(x, y) ∇ log π(y|x)]`.
/// Occupancy side: `Σ_s d_μ(s) Σ_a μ(a|s) Q^μ(s, a) ∇ log π(a|s)`, where
/// `Q^μ(s, a)` is the expected terminal reward after taking `a` in `s`.
pub fn verify_lemma1(
    spec: &MdpSpec,
    params: &PolicyParams,
    train: &EngineConfig,
    rollout: &EngineConfig,
) -> Result<Lemma1Report> {
    let sequence_side = exact_policy_gradient(spec, params, rollout, train)?;
    let values = value_table(spec, params, rollout)?;
    let occupancy = forward_occupancy(spec, params, rollout)?;
    let mut occupancy_side = vec![0.0; params.param_count()];
    let mut sc = Scratch::default();
    for level in &occupancy {
        for (key, &d) in level {
            let state = State::new(key.0, &key.1);
            let mu = params.token_distribution(rollout, state)?;
            params.distribution_into(train, state, &mut sc)?;
            let mut child = key.1.clone();
            for (a, &mu_a) in mu.iter().enumerate() {
                child.push(a as Token);
                let q = if spec.is_terminal(&child) {
                    spec.reward_of(key.0, &child) as f64
                } else {
                    values[&(key.0, child.clone())]
                };
                child.pop();
                let w = d * mu_a * q;
                if w != 0.0 {
                    add_score(params.vocab_size, sc.features(), sc.probs(), a, w, &mut occupancy_side);
                }
            }
        }
    }
    let diff: Vec<f64> = sequence_side.iter().zip(&occupancy_side).map(|(a, b)| a - b).collect();
    Ok(Lemma1Report { residual: l2_norm(&diff), sequence_side, occupancy_side })
}

/// Forward recursion of per-step occupancy: level `t` maps each non-terminal
/// prefix of length `t` to its probability under `engine`.
fn forward_occupancy(
    spec: &MdpSpec,
    params: &PolicyParams,
    engine: &EngineConfig,
) -> Result<Vec<BTreeMap<PrefixKey, f64>>> {
    let mut levels = Vec::with_capacity(spec.max_horizon() + 1);
    let mut current: BTreeMap<PrefixKey, f64> =
        spec.prompt_distribution().iter().enumerate().map(|(x, &p)| ((x as u32, Vec::new()), p)).collect();
    for _ in 0..spec.max_horizon() {
        let mut next = BTreeMap::new();
        for ((prompt, prefix), &d) in &current {
            let q = params.token_distribution(engine, State::new(*prompt, prefix))?;
            for (a, &qa) in q.iter().enumerate() {
                let mut child = prefix.clone();
                child.push(a as Token);
                if !spec.is_terminal(&child) {
                    *next.entry((*prompt, child)).or_insert(0.0) += d * qa;
                }
            }
        }
        levels.push(std::mem::replace(&mut current, next));
    }
    levels.push(current);
    Ok(levels)
}

/// Per-step occupancy of both engines and their L1 drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    /// `d_t[s]` per engine: `(state, d_π, d_μ)` sorted by state, for
    /// `t = 0..=T`.
    pub levels: Vec<Vec<(OwnedState, f64, f64)>>,
    /// `δ_t = ‖d_{π,t} − d_{μ,t}‖₁`.
    pub delta: Vec<f64>,
    pub delta_max: f64,
    /// `δ_t ≤ 2 t Δmax` per `t`.
    pub bound_holds: Vec<bool>,
}

impl OccupancyTable {
    pub fn all_hold(&self) -> bool {
        self.bound_holds.iter().all(|&b| b)
    }
}

pub fn verify_lemma2(
    spec: &MdpSpec,
    params: &PolicyParams,
    train: &EngineConfig,
    rollout: &EngineConfig,
) -> Result<OccupancyTable> {
    let states = reachable_states(spec)?;
    let (_, delta_max) = realized_tv(params, train, rollout, &states)?;
    let d_pi = forward_occupancy(spec, params, train)?;
    let d_mu = forward_occupancy(spec, params, rollout)?;
    let mut levels = Vec::with_capacity(d_pi.len());
    let mut delta = Vec::with_capacity(d_pi.len());
    let mut bound_holds = Vec::with_capacity(d_pi.len());
    for (t, (lp, lm)) in d_pi.iter().zip(&d_mu).enumerate() {
        let mut keys: Vec<&PrefixKey> = lp.keys().chain(lm.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut level = Vec::with_capacity(keys.len());
        let mut l1 = 0.0;
        for k in keys {
            let a = lp.get(k).copied().unwrap_or(0.0);
            let b = lm.get(k).copied().unwrap_or(0.0);
            l1 += (a - b).abs();
            level.push((OwnedState { prompt: k.0, prefix: k.1.clone() }, a, b));
        }
        bound_holds.push(l1 <= 2.0 * t as f64 * delta_max + BOUND_SLACK);
        delta.push(l1);
        levels.push(level);
    }
    Ok(OccupancyTable { levels, delta, delta_max, bound_holds })
}

/// Horizon bound check `‖∇J_actual − ∇J‖₂ ≤ 2 B Δmax T²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "B")]
    pub score_bound: f64,
    #[serde(rename = "Delta_max")]
    pub delta_max: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

pub fn verify_theorem1(
    spec: &MdpSpec,
    params: &PolicyParams,
    train: &EngineConfig,
    rollout: &EngineConfig,
) -> Result<TheoremReport> {
    let states = reachable_states(spec)?;
    let (_, delta_max) = realized_tv(params, train, rollout, &states)?;
    let score_bound = params.score_bound(train, &states)?;
    let ideal = exact_policy_gradient(spec, params, train, train)?;
    let actual = exact_policy_gradient(spec, params, rollout, train)?;
    let diff: Vec<f64> = actual.iter().zip(&ideal).map(|(a, b)| a - b).collect();
    let lhs = l2_norm(&diff);
    let horizon = spec.max_horizon();
    let rhs = 2.0 * score_bound * delta_max * (horizon * horizon) as f64;
    Ok(TheoremReport { horizon, score_bound, delta_max, lhs, rhs, satisfied: lhs <= rhs + BOUND_SLACK })
}

/// One verification grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub vocab_size: usize,
    pub horizon: usize,
    pub tv_scale: f64,
    pub param_seed: u64,
}

/// The MDP, policy and engines a grid point stands for.
pub struct GridSetup {
    pub spec: MdpSpec,
    pub params: PolicyParams,
    pub mismatch: MismatchSpec,
}

impl GridPoint {
    /// Random binary-reward MDP with EOS = 0 and two prompts, dense hashed
    /// features with a bias coordinate, Gaussian weights, controlled-TV
    /// rollout engine.
    pub fn setup(&self) -> Result<GridSetup> {
        use rand::SeedableRng;
        let seed = self.param_seed.wrapping_mul(1_000_003) ^ ((self.vocab_size as u64) << 32) ^ self.horizon as u64;
        let spec = MdpSpec::random(self.vocab_size, self.horizon, Some(0), 2, 0.5, seed)?;
        let fm = FeatureMap::hashed(6, self.horizon.max(1), seed ^ 0x5eed, true);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParams::random(fm, self.vocab_size, 1.0, &mut rng)?;
        let mismatch = MismatchSpec::controlled_tv(self.tv_scale, seed ^ 0x7f);
        Ok(GridSetup { spec, params, mismatch })
    }
}

/// Everything measured at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    #[serde(flatten)]
    pub point: GridPoint,
    pub theorem: TheoremReport,
    pub lemma1_residual: f64,
    pub lemma2_delta: Vec<f64>,
    pub lemma2_holds: bool,
    /// `‖E[seq-IS] − ∇J‖₂` over the exact μ-expectation.
    pub seq_is_gap: f64,
    /// `‖E[token-IS] − ∇J‖₂`.
    pub token_is_gap: f64,
}

impl GridReport {
    pub fn passed(&self, lemma1_tol: f64, seq_is_tol: f64) -> bool {
        self.theorem.satisfied
            && self.lemma1_residual <= lemma1_tol
            && self.lemma2_holds
            && self.lemma2_delta.first() == Some(&0.0)
            && self.seq_is_gap <= seq_is_tol
    }
}

pub fn run_grid_point(point: GridPoint) -> Result<GridReport> {
    let GridSetup { spec, params, mismatch } = point.setup()?;
    let (train, rollout) = (mismatch.train(), mismatch.rollout());
    let theorem = verify_theorem1(&spec, &params, &train, &rollout)?;
    let lemma1 = verify_lemma1(&spec, &params, &train, &rollout)?;
    let lemma2 = verify_lemma2(&spec, &params, &train, &rollout)?;
    let ideal = exact_policy_gradient(&spec, &params, &train, &train)?;
    let gap = |kind| -> Result<f64> {
        let e = exact_estimator_expectation(&spec, &params, &train, &rollout, &EstimatorConfig::new(kind))?;
        Ok(l2_norm(&e.iter().zip(&ideal).map(|(a, b)| a - b).collect::<Vec<_>>()))
    };
    Ok(GridReport {
        point,
        theorem,
        lemma1_residual: lemma1.residual,
        lemma2_holds: lemma2.all_hold(),
        lemma2_delta: lemma2.delta,
        seq_is_gap: gap(estimators::EstimatorKind::IsSeq)?,
        token_is_gap: gap(estimators::EstimatorKind::IsToken)?,
    })
}

/// Default grid: V ∈ {2, 3}, T ∈ 1..=6, five TV scales, three seeds.
pub fn default_grid() -> Vec<GridPoint> {
    let mut pts = Vec::new();
    for vocab_size in [2, 3] {
        for horizon in 1..=6 {
            for tv_scale in [0.0, 0.05, 0.2, 0.5, 1.0] {
                for param_seed in 0..3 {
                    pts.push(GridPoint { vocab_size, horizon, tv_scale, param_seed });
                }
            }
        }
    }
    pts
}

/// Runs grid points in parallel; output order follows input order.
pub fn run_grid(points: &[GridPoint]) -> Result<Vec<GridReport>> {
    points.par_iter().map(|&p| run_grid_point(p)).collect()
}

/// Writes `<stem>.json` (one object per point) and a `<stem>.csv` summary.
pub fn write_grid_reports(dir: &Path, stem: &str, reports: &[GridReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(reports)?)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    w.write_record([
        "vocab_size",
        "horizon",
        "tv_scale",
        "param_seed",
        "B",
        "Delta_max",
        "lhs",
        "rhs",
        "satisfied",
        "lemma1_residual",
        "lemma2_max_delta",
        "lemma2_holds",
        "seq_is_gap",
        "token_is_gap",
    ])?;
    for r in reports {
        let t = &r.theorem;
        let max_delta = r.lemma2_delta.iter().copied().fold(0.0, f64::max);
        w.write_record([
            r.point.vocab_size.to_string(),
            r.point.horizon.to_string(),
            r.point.tv_scale.to_string(),
            r.point.param_seed.to_string(),
            t.score_bound.to_string(),
            t.delta_max.to_string(),
            t.lhs.to_string(),
            t.rhs.to_string(),
            t.satisfied.to_string(),
            r.lemma1_residual.to_string(),
            max_delta.to_string(),
            r.lemma2_holds.to_string(),
            r.seq_is_gap.to_string(),
            r.token_is_gap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
