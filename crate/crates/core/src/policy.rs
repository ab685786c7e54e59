//! Autoregressive softmax policy evaluated by two numerical engines.
//!
//! Logits are linear in a state feature vector: `z_a = Σ_k φ_k(s) θ[k, a]`.
//! The training engine accumulates that sum as a balanced pairwise tree; the
//! rollout engine may instead use a sequential fold (reduction-order mismatch)
//! or add a seeded per-state logit perturbation (controlled-TV mismatch).
//! Softmax normalisation is always carried out in f64 so every emitted
//! distribution sums to one to within f64 rounding.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::ScoreSource;
use crate::numerics::{self, hash_words, unit_interval_signed, Precision, ReductionOrder};
use crate::toyenv::{Environment, Token};

/// A prefix state `(prompt, y_<t)`.
#[derive(Clone, Copy, Debug)]
pub struct State<'a> {
    pub prompt: u32,
    pub prefix: &'a [Token],
}

impl<'a> State<'a> {
    pub fn new(prompt: u32, prefix: &'a [Token]) -> Self {
        State { prompt, prefix }
    }
}

/// Owned counterpart of [`State`], used for state lists.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OwnedState {
    pub prompt: u32,
    pub prefix: Vec<Token>,
}

impl OwnedState {
    pub fn as_state(&self) -> State<'_> {
        State { prompt: self.prompt, prefix: &self.prefix }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// One-hot over `(prompt, position, previous token)`, wrapped into the
    /// available dimensions.
    OneHot,
    /// Dense pseudo-random features in `[-1, 1]`, a seeded hash of
    /// `(prompt, position, previous token, k)`.
    Hashed,
}

/// Maps a state to a feature vector of dimension `dim`.
///
/// With `bias` set, the last coordinate is a constant 1 shared by all states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub dim: usize,
    #[serde(default)]
    pub bias: bool,
    /// Number of distinct positions the one-hot layout reserves per prompt.
    pub positions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl FeatureMap {
    /// Exact (non-aliased) one-hot layout for the given sizes.
    pub fn one_hot(vocab_size: usize, positions: usize, num_prompts: usize, bias: bool) -> Self {
        let cells = num_prompts * positions * (vocab_size + 1);
        FeatureMap { kind: FeatureKind::OneHot, dim: cells + usize::from(bias), bias, positions, seed: 0 }
    }

    pub fn hashed(dim: usize, positions: usize, seed: u64, bias: bool) -> Self {
        FeatureMap { kind: FeatureKind::Hashed, dim, bias, positions, seed }
    }

    fn free_dims(&self) -> usize {
        self.dim - usize::from(self.bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.free_dims() == 0 {
            return Err(Error::config("feature map needs at least one non-bias dimension"));
        }
        if self.positions == 0 {
            return Err(Error::config("feature map positions must be positive"));
        }
        Ok(())
    }

    /// Writes the sparse features of `state` into `out` as `(index, value)`
    /// pairs in increasing index order.
    pub fn features_into(&self, state: State<'_>, vocab_size: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let position = state.prefix.len();
        // BOS is encoded as `vocab_size`.
        let prev = state.prefix.last().map_or(vocab_size, |&t| t as usize);
        let free = self.free_dims();
        match self.kind {
            FeatureKind::OneHot => {
                let cell = ((state.prompt as usize * self.positions + position.min(self.positions - 1))
                    * (vocab_size + 1)
                    + prev)
                    % free;
                out.push((cell, 1.0));
            }
            FeatureKind::Hashed => {
                let base = hash_words(self.seed, [state.prompt as u64, position as u64, prev as u64]);
                out.extend((0..free).map(|k| (k, unit_interval_signed(numerics::mix64(base ^ k as u64)))));
            }
        }
        if self.bias {
            out.push((self.dim - 1, 1.0));
        }
    }

    pub fn features(&self, state: State<'_>, vocab_size: usize) -> Vec<(usize, f64)> {
        let mut v = Vec::new();
        self.features_into(state, vocab_size, &mut v);
        v
    }
}

/// Policy weights: a `feature_dim × vocab_size` matrix, row-major, plus the
/// feature map that defines what the rows mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub feature_map: FeatureMap,
    pub vocab_size: usize,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(feature_map: FeatureMap, vocab_size: usize) -> Result<Self> {
        feature_map.validate()?;
        if vocab_size < 2 {
            return Err(Error::config("policy vocab_size must be at least 2"));
        }
        let theta = vec![0.0; feature_map.dim * vocab_size];
        Ok(PolicyParams { feature_map, vocab_size, theta })
    }

    /// Gaussian initialisation with standard deviation `scale`.
    pub fn random(feature_map: FeatureMap, vocab_size: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(feature_map, vocab_size)?;
        let normal = rand_distr::Normal::new(0.0, scale).map_err(|e| Error::config(format!("bad init scale: {e}")))?;
        for w in &mut p.theta {
            *w = rng.sample(normal);
        }
        Ok(p)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_map.dim
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    #[inline]
    pub fn weight(&self, k: usize, a: usize) -> f64 {
        self.theta[k * self.vocab_size + a]
    }

    /// Adds `value` to every row's entry for token `a` that the bias feature
    /// touches; used to set an initial EOS preference.
    pub fn add_bias_logit(&mut self, a: usize, value: f64) -> Result<()> {
        if !self.feature_map.bias {
            return Err(Error::config("feature map has no bias coordinate"));
        }
        let k = self.feature_map.dim - 1;
        self.theta[k * self.vocab_size + a] += value;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.theta.iter().position(|w| !w.is_finite()) {
            return Err(Error::Numeric(format!("non-finite weight at index {i}")));
        }
        Ok(())
    }

    /// Writes the binary checkpoint: magic `MLPP`, u32 version, u32 rows,
    /// u32 cols, then `rows * cols` little-endian f64, followed by the
    /// feature map as a length-prefixed JSON blob.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"MLPP")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.feature_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        for x in &self.theta {
            w.write_all(&x.to_le_bytes())?;
        }
        let fm = serde_json::to_vec(&self.feature_map)?;
        w.write_all(&(fm.len() as u32).to_le_bytes())?;
        w.write_all(&fm)?;
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MLPP" {
            return Err(Error::config("not a policy checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::config(format!("unsupported checkpoint version {version}")));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut theta = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            theta.push(f64::from_le_bytes(buf));
        }
        let fm_len = read_u32(&mut r)? as usize;
        let mut fm = vec![0u8; fm_len];
        r.read_exact(&mut fm)?;
        let feature_map: FeatureMap = serde_json::from_slice(&fm)?;
        if feature_map.dim != rows {
            return Err(Error::config("checkpoint shape disagrees with its feature map"));
        }
        let p = PolicyParams { feature_map, vocab_size: cols, theta };
        p.check_finite()?;
        Ok(p)
    }

    /// JSON checkpoint with an explicit `shape` header.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "shape": [self.feature_dim(), self.vocab_size],
            "feature_map": self.feature_map,
            "theta": self.theta,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            shape: [usize; 2],
            feature_map: FeatureMap,
            theta: Vec<f64>,
        }
        let d: Doc = serde_json::from_value(v.clone())?;
        if d.shape[0] * d.shape[1] != d.theta.len() || d.shape[0] != d.feature_map.dim {
            return Err(Error::config("checkpoint shape header disagrees with data"));
        }
        let p = PolicyParams { feature_map: d.feature_map, vocab_size: d.shape[1], theta: d.theta };
        p.check_finite()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Train,
    Rollout,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchMode {
    /// Both engines run the identical arithmetic.
    #[default]
    None,
    /// Rollout accumulates logits sequentially, training pairwise.
    ReductionOrder,
    /// Rollout adds `tv_scale · u(seed, state, a)` to each logit, `u ∈ [-1, 1]`.
    ControlledTv,
}

/// One engine's numerics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub engine_kind: EngineKind,
    pub mismatch_mode: MismatchMode,
    pub precision_emulation: Precision,
    pub tv_scale: f64,
    pub perturbation_seed: u64,
}

/// The shared description from which both engines are derived, so that
/// `mismatch_mode = none` always yields identical engines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchSpec {
    #[serde(default)]
    pub mismatch_mode: MismatchMode,
    #[serde(default)]
    pub precision_emulation: Precision,
    #[serde(default)]
    pub tv_scale: f64,
    #[serde(default)]
    pub perturbation_seed: u64,
}

impl MismatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_scale.is_finite() && self.tv_scale >= 0.0) {
            return Err(Error::config("tv_scale must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn engine(&self, kind: EngineKind) -> EngineConfig {
        EngineConfig {
            engine_kind: kind,
            mismatch_mode: self.mismatch_mode,
            precision_emulation: self.precision_emulation,
            tv_scale: self.tv_scale,
            perturbation_seed: self.perturbation_seed,
        }
    }

    pub fn train(&self) -> EngineConfig {
        self.engine(EngineKind::Train)
    }

    pub fn rollout(&self) -> EngineConfig {
        self.engine(EngineKind::Rollout)
    }

    pub fn controlled_tv(tv_scale: f64, seed: u64) -> Self {
        MismatchSpec {
            mismatch_mode: MismatchMode::ControlledTv,
            precision_emulation: Precision::Exact,
            tv_scale,
            perturbation_seed: seed,
        }
    }

    /// Rollout engine sums logits sequentially at reduced precision.
    pub fn precision(precision: Precision) -> Self {
        MismatchSpec {
            mismatch_mode: MismatchMode::ReductionOrder,
            precision_emulation: precision,
            tv_scale: 0.0,
            perturbation_seed: 0,
        }
    }
}

impl EngineConfig {
    /// Reference engine: training kind, no mismatch, exact precision.
    pub fn reference() -> Self {
        MismatchSpec::default().train()
    }

    pub fn reduction_order(&self) -> ReductionOrder {
        match (self.engine_kind, self.mismatch_mode) {
            (EngineKind::Rollout, MismatchMode::ReductionOrder) => ReductionOrder::Sequential,
            _ => ReductionOrder::Pairwise,
        }
    }

    fn perturbs(&self) -> bool {
        self.engine_kind == EngineKind::Rollout
            && self.mismatch_mode == MismatchMode::ControlledTv
            && self.tv_scale != 0.0
    }
}

/// Logits of one state under `engine`, given its sparse features.
pub fn engine_logits(
    params: &PolicyParams,
    features: &[(usize, f64)],
    engine: &EngineConfig,
    state: State<'_>,
    out: &mut Vec<f64>,
) -> Result<()> {
    let prec = engine.precision_emulation;
    let order = engine.reduction_order();
    out.clear();
    let mut terms = Vec::with_capacity(features.len());
    for a in 0..params.vocab_size {
        terms.clear();
        terms.extend(features.iter().map(|&(k, phi)| prec.round(phi * params.weight(k, a))));
        let mut z = numerics::reduce(&terms, order, prec);
        if engine.perturbs() {
            z = prec.round(z + engine.tv_scale * perturbation(engine.perturbation_seed, state, a));
        }
        if !z.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit for token {a}")));
        }
        out.push(z);
    }
    Ok(())
}

/// Seeded perturbation direction in `[-1, 1]`; depends only on
/// `(seed, prompt, prefix, action)`.
pub fn perturbation(seed: u64, state: State<'_>, action: usize) -> f64 {
    let h = hash_words(
        seed,
        std::iter::once(state.prompt as u64)
            .chain(std::iter::once(state.prefix.len() as u64))
            .chain(state.prefix.iter().map(|&t| t as u64))
            .chain(std::iter::once(action as u64)),
    );
    unit_interval_signed(h)
}

/// Softmax of `logits` in place. Exponentials are rounded to the engine's
/// precision; the normalising division is f64. Entries are floored at the
/// smallest positive normal so log-probabilities stay finite.
pub fn softmax_in_place(logits: &mut [f64], precision: Precision) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in logits.iter_mut() {
        *z = precision.round((*z - m).exp());
        total += *z;
    }
    for p in logits.iter_mut() {
        *p = (*p / total).max(f64::MIN_POSITIVE);
    }
}

/// Reusable buffers for repeated distribution evaluations.
#[derive(Default)]
pub struct Scratch {
    features: Vec<(usize, f64)>,
    probs: Vec<f64>,
}

impl Scratch {
    pub fn features(&self) -> &[(usize, f64)] {
        &self.features
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl PolicyParams {
    /// Next-token distribution at `state` under `engine`.
    pub fn token_distribution(&self, engine: &EngineConfig, state: State<'_>) -> Result<Vec<f64>> {
        let mut s = Scratch::default();
        self.distribution_into(engine, state, &mut s)?;
        Ok(s.probs)
    }

    /// As [`Self::token_distribution`], reusing `scratch`; afterwards
    /// `scratch.features()` holds the state features and `scratch.probs()` the
    /// distribution.
    pub fn distribution_into(&self, engine: &EngineConfig, state: State<'_>, scratch: &mut Scratch) -> Result<()> {
        self.feature_map.features_into(state, self.vocab_size, &mut scratch.features);
        engine_logits(self, &scratch.features, engine, state, &mut scratch.probs)?;
        softmax_in_place(&mut scratch.probs, engine.precision_emulation);
        Ok(())
    }

    /// `∇_θ log π(a|s)` under `engine` as a dense vector in `theta` layout:
    /// `φ(s) ⊗ (e_a − π(·|s))`.
    pub fn score_function(&self, engine: &EngineConfig, state: State<'_>, action: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.param_count()];
        let mut s = Scratch::default();
        self.distribution_into(engine, state, &mut s)?;
        add_score(self.vocab_size, &s.features, &s.probs, action, 1.0, &mut out);
        Ok(out)
    }

    /// `max_{s, a} ‖∇_θ log π(a|s)‖₂` over the given states and every action.
    pub fn score_bound(&self, engine: &EngineConfig, states: &[OwnedState]) -> Result<f64> {
        let mut s = Scratch::default();
        let mut best = 0.0f64;
        for st in states {
            self.distribution_into(engine, st.as_state(), &mut s)?;
            let phi_sq: f64 = s.features.iter().map(|(_, v)| v * v).sum();
            let p_sq: f64 = s.probs.iter().map(|p| p * p).sum();
            for a in 0..self.vocab_size {
                // ‖e_a − π‖² = (1 − π_a)² + Σ_{b≠a} π_b² = 1 − 2π_a + Σ_b π_b²
                let diff_sq = (1.0 - 2.0 * s.probs[a] + p_sq).max(0.0);
                best = best.max((phi_sq * diff_sq).sqrt());
            }
        }
        Ok(best)
    }

    /// Per-token log-probabilities of `tokens` under `engine`.
    pub fn score_sequence(&self, engine: &EngineConfig, prompt: u32, tokens: &[Token]) -> Result<Vec<f64>> {
        let mut s = Scratch::default();
        let mut out = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            self.distribution_into(engine, State::new(prompt, &tokens[..t]), &mut s)?;
            out.push(s.probs[tokens[t] as usize].ln());
        }
        Ok(out)
    }
}

/// `out += coef · φ ⊗ (e_action − probs)`.
#[inline]
pub fn add_score(vocab: usize, features: &[(usize, f64)], probs: &[f64], action: usize, coef: f64, out: &mut [f64]) {
    for &(k, phi) in features {
        let row = &mut out[k * vocab..(k + 1) * vocab];
        let c = coef * phi;
        for (b, slot) in row.iter_mut().enumerate() {
            let indicator = if b == action { 1.0 } else { 0.0 };
            *slot += c * (indicator - probs[b]);
        }
    }
}

/// TV distance `½ Σ_a |p_a − q_a|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Per-state TV between the two engines and its maximum (`Δmax`).
pub fn realized_tv(
    params: &PolicyParams,
    train: &EngineConfig,
    rollout: &EngineConfig,
    states: &[OwnedState],
) -> Result<(Vec<f64>, f64)> {
    let mut per_state = Vec::with_capacity(states.len());
    for s in states {
        let p = params.token_distribution(train, s.as_state())?;
        let q = params.token_distribution(rollout, s.as_state())?;
        per_state.push(total_variation(&p, &q));
    }
    let max = per_state.iter().copied().fold(0.0, f64::max);
    Ok((per_state, max))
}

/// A sampled response with both engines' token log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: u32,
    pub tokens: Vec<Token>,
    /// `log π_θ(y_t | x, y_<t)` from the training engine (re-scored).
    pub logprob_train: Vec<f64>,
    /// `log μ_θ(y_t | x, y_<t)` recorded at sampling time.
    pub logprob_rollout: Vec<f64>,
    pub reward: u8,
    /// Hit the length cap without emitting EOS.
    pub truncated: bool,
    /// Sum over steps of the training engine's next-token entropy.
    pub entropy_sum: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.logprob_train.len() != self.tokens.len() || self.logprob_rollout.len() != self.tokens.len() {
            return Err(Error::contract("log-prob lists must have one entry per token"));
        }
        if self.logprob_train.iter().chain(&self.logprob_rollout).any(|&l| !(l <= 0.0)) {
            return Err(Error::contract("log-probs must be <= 0"));
        }
        Ok(())
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Samples one response autoregressively from `rollout`, then re-scores the
/// same tokens with `train`.
pub fn sample_trajectory(
    params: &PolicyParams,
    rollout: &EngineConfig,
    train: &EngineConfig,
    env: &dyn Environment,
    prompt: u32,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if rollout.engine_kind != EngineKind::Rollout {
        return Err(Error::contract("sample_trajectory needs a rollout engine"));
    }
    if env.vocab_size() != params.vocab_size {
        return Err(Error::config("environment and policy disagree on vocab_size"));
    }
    let cap = env.max_len();
    let mut tokens: Vec<Token> = Vec::with_capacity(cap);
    let mut logprob_rollout = Vec::with_capacity(cap);
    let mut logprob_train = Vec::with_capacity(cap);
    let mut entropy_sum = 0.0;
    let mut s = Scratch::default();
    let mut train_s = Scratch::default();
    let mut truncated = false;
    loop {
        let state = State::new(prompt, &tokens);
        params.distribution_into(rollout, state, &mut s)?;
        let a = sample_index(&s.probs, rng);
        params.distribution_into(train, state, &mut train_s)?;
        entropy_sum += entropy(&train_s.probs);
        logprob_rollout.push(s.probs[a].ln());
        logprob_train.push(train_s.probs[a].ln());
        tokens.push(a as Token);
        if env.eos_token() == Some(a as Token) {
            break;
        }
        if tokens.len() >= cap {
            truncated = env.eos_token().is_some();
            break;
        }
    }
    let reward = env.reward(prompt, &tokens, truncated);
    Ok(Trajectory { prompt, tokens, logprob_train, logprob_rollout, reward, truncated, entropy_sum })
}

/// Inverse-CDF draw.
fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum.
    probs.iter().rposition(|&p| p > f64::MIN_POSITIVE).unwrap_or(probs.len() - 1)
}

/// Score accumulation under the training engine.
pub struct TrainScorer<'a> {
    pub params: &'a PolicyParams,
    pub engine: EngineConfig,
}

impl<'a> TrainScorer<'a> {
    pub fn new(params: &'a PolicyParams, engine: EngineConfig) -> Self {
        TrainScorer { params, engine }
    }
}

impl ScoreSource for TrainScorer<'_> {
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn accumulate(&self, traj: &Trajectory, coefs: &[f64], out: &mut [f64]) -> Result<()> {
        let mut s = Scratch::default();
        for (t, &c) in coefs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            self.params.distribution_into(&self.engine, State::new(traj.prompt, &traj.tokens[..t]), &mut s)?;
            add_score(self.params.vocab_size, &s.features, &s.probs, traj.tokens[t] as usize, c, out);
        }
        Ok(())
    }
}
