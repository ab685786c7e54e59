//! Policy-gradient estimators for rollouts drawn from a (possibly different)
//! rollout policy μ and scored under the training policy π.
//!
//! Every estimator reduces to per-token coefficients `c_{i,t}` and the vector
//!
//! ```text
//! g = Σ_i m_i Σ_t c_{i,t} ∇_θ log π(y_{i,t} | x_i, y_{i,<t})
//! ```
//!
//! where `m_i` is either `1/N` (a sample mean) or an explicit probability
//! mass (an exact expectation over an enumerated support). Trajectories are
//! reduced strictly in batch order, one after another, so results never
//! depend on thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Trajectory;

/// Default saturation guard on `|log ρ|`.
pub const DEFAULT_LOG_RATIO_GUARD: f64 = 50.0;

/// Source of per-token score vectors `∇_θ log π(y_t | s_t)`.
pub trait ScoreSource {
    fn param_count(&self) -> usize;

    /// `out += Σ_t coefs[t] · ∇_θ log π(y_t | s_t)` for one trajectory.
    fn accumulate(&self, traj: &Trajectory, coefs: &[f64], out: &mut [f64]) -> Result<()>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// REINFORCE on samples from π.
    Vanilla,
    /// REINFORCE on samples from μ, no correction.
    Actual,
    IsSeq,
    IsToken,
    TisToken,
    TisSeq,
    MisToken,
    MisSeq,
    /// Asymmetric PPO clipped surrogate.
    PpoClip,
}

impl EstimatorKind {
    pub fn level(self) -> Option<Level> {
        use EstimatorKind::*;
        match self {
            IsSeq | TisSeq | MisSeq => Some(Level::Sequence),
            IsToken | TisToken | MisToken | PpoClip => Some(Level::Token),
            Vanilla | Actual => None,
        }
    }

    pub fn name(self) -> &'static str {
        use EstimatorKind::*;
        match self {
            Vanilla => "vanilla",
            Actual => "actual",
            IsSeq => "is_seq",
            IsToken => "is_token",
            TisToken => "tis_token",
            TisSeq => "tis_seq",
            MisToken => "mis_token",
            MisSeq => "mis_seq",
            PpoClip => "ppo_clip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Token,
    Sequence,
}

/// How ratios are turned into weights.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Correction {
    None,
    Plain,
    Truncate(f64),
    Mask(f64),
}

impl Correction {
    fn apply(self, rho: f64) -> (f64, bool) {
        match self {
            Correction::None => (1.0, false),
            Correction::Plain => (rho, false),
            Correction::Truncate(c) => {
                if rho > c {
                    (c, true)
                } else {
                    (rho, false)
                }
            }
            Correction::Mask(c) => {
                if rho > c {
                    (0.0, true)
                } else {
                    (rho, false)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    pub estimator_kind: EstimatorKind,
    pub batch_size: usize,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        crate::numerics::l2_norm(&self.vector)
    }
}

/// Probability ratios observed while building an estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    /// `ρ_t = π/μ` per token, per trajectory (after the saturation guard).
    pub token_ratios: Vec<Vec<f64>>,
    /// `ρ_seq = Π_t ρ_t` per trajectory (after the saturation guard).
    pub seq_ratios: Vec<f64>,
    pub clip_threshold: f64,
    /// Fraction of ratio units (tokens or sequences) that were truncated,
    /// masked or clipped.
    pub clipped_fraction: f64,
    /// Number of log-ratios that hit the saturation guard.
    pub saturated: usize,
}

/// Weighting of trajectories in the final sum.
#[derive(Clone, Copy, Debug)]
pub enum Mass<'a> {
    /// Sample mean, `m_i = 1/N`.
    Mean,
    /// Exact expectation, `m_i` given (e.g. `p(x) μ(y|x)`).
    Weights(&'a [f64]),
}

/// Options shared by the estimator family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Truncation / mask threshold `C`. `+∞` disables it.
    #[serde(default = "default_c", with = "crate::harness::serde_inf")]
    pub clip_c: f64,
    #[serde(default = "default_eps_low")]
    pub eps_low: f64,
    #[serde(default = "default_eps_high")]
    pub eps_high: f64,
    #[serde(default = "default_guard")]
    pub log_ratio_guard: f64,
}

fn default_c() -> f64 {
    2.0
}
fn default_eps_low() -> f64 {
    0.2
}
fn default_eps_high() -> f64 {
    0.28
}
fn default_guard() -> f64 {
    DEFAULT_LOG_RATIO_GUARD
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            clip_c: default_c(),
            eps_low: default_eps_low(),
            eps_high: default_eps_high(),
            log_ratio_guard: default_guard(),
        }
    }

    pub fn with_c(mut self, c: f64) -> Self {
        self.clip_c = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0) {
            return Err(Error::config(format!("threshold C must be > 0, got {}", self.clip_c)));
        }
        check_eps(self.eps_low, self.eps_high)?;
        if !(self.log_ratio_guard > 0.0) {
            return Err(Error::config("log_ratio_guard must be > 0"));
        }
        Ok(())
    }

    fn correction(&self) -> Correction {
        use EstimatorKind::*;
        match self.kind {
            Vanilla | Actual | PpoClip => Correction::None,
            IsSeq | IsToken => Correction::Plain,
            TisToken | TisSeq => Correction::Truncate(self.clip_c),
            MisToken | MisSeq => Correction::Mask(self.clip_c),
        }
    }
}

fn check_eps(lo: f64, hi: f64) -> Result<()> {
    for (name, e) in [("eps_low", lo), ("eps_high", hi)] {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::config(format!("{name} must lie in (0, 1), got {e}")));
        }
    }
    Ok(())
}

/// Clamps a log-ratio to `±guard`; returns whether it saturated.
fn guard_log_ratio(lr: f64, guard: f64) -> (f64, bool) {
    if lr.is_nan() {
        // Both engines assigned zero mass; treat as ratio 1.
        return (0.0, true);
    }
    if lr > guard {
        (guard, true)
    } else if lr < -guard {
        (-guard, true)
    } else {
        (lr, false)
    }
}

/// Per-token log-ratios and the sequence log-ratio, each guarded.
fn log_ratios(traj: &Trajectory, guard: f64, saturated: &mut usize) -> (Vec<f64>, f64) {
    let mut seq = 0.0;
    let per: Vec<f64> = traj
        .logprob_train
        .iter()
        .zip(&traj.logprob_rollout)
        .map(|(lp, lm)| {
            let raw = lp - lm;
            seq += raw;
            let (g, sat) = guard_log_ratio(raw, guard);
            *saturated += usize::from(sat);
            g
        })
        .collect();
    let (seq, sat) = guard_log_ratio(seq, guard);
    *saturated += usize::from(sat);
    (per, seq)
}

fn validate_batch(trajs: &[Trajectory], signals: &[f64], mass: Mass<'_>) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if signals.len() != trajs.len() {
        return Err(Error::contract("one reward/advantage per trajectory required"));
    }
    if let Mass::Weights(w) = mass {
        if w.len() != trajs.len() {
            return Err(Error::contract("one mass per trajectory required"));
        }
    }
    for t in trajs {
        t.check()?;
    }
    Ok(())
}

fn mass_of(mass: Mass<'_>, i: usize, n: usize) -> f64 {
    match mass {
        Mass::Mean => 1.0 / n as f64,
        Mass::Weights(w) => w[i],
    }
}

/// General entry point. `signals[i]` is the reward or advantage multiplying
/// trajectory `i`'s score.
pub fn estimate(
    cfg: &EstimatorConfig,
    trajs: &[Trajectory],
    signals: &[f64],
    mass: Mass<'_>,
    scorer: &dyn ScoreSource,
) -> Result<(GradientEstimate, RatioStats)> {
    cfg.validate()?;
    validate_batch(trajs, signals, mass)?;
    let n = trajs.len();
    let mut vector = vec![0.0; scorer.param_count()];
    let mut stats = RatioStats { clip_threshold: cfg.clip_c, ..Default::default() };
    let mut units = 0usize;
    let mut clipped = 0usize;
    let corr = cfg.correction();
    let mut coefs = Vec::new();

    for (i, traj) in trajs.iter().enumerate() {
        let (per, seq) = log_ratios(traj, cfg.log_ratio_guard, &mut stats.saturated);
        let token_rho: Vec<f64> = per.iter().map(|l| l.exp()).collect();
        let seq_rho = seq.exp();
        let w = signals[i];
        coefs.clear();
        match cfg.kind {
            EstimatorKind::PpoClip => {
                for &rho in &token_rho {
                    let clip = (w > 0.0 && rho > 1.0 + cfg.eps_high) || (w < 0.0 && rho < 1.0 - cfg.eps_low);
                    clipped += usize::from(clip);
                    units += 1;
                    coefs.push(if clip { 0.0 } else { rho * w });
                }
            }
            kind => match kind.level() {
                None => coefs.extend(std::iter::repeat_n(w, traj.len())),
                Some(Level::Token) => {
                    for &rho in &token_rho {
                        let (weight, hit) = corr.apply(rho);
                        clipped += usize::from(hit);
                        units += 1;
                        coefs.push(weight * w);
                    }
                }
                Some(Level::Sequence) => {
                    let (weight, hit) = corr.apply(seq_rho);
                    clipped += usize::from(hit);
                    units += 1;
                    coefs.extend(std::iter::repeat_n(weight * w, traj.len()));
                }
            },
        }
        let m = mass_of(mass, i, n);
        for c in coefs.iter_mut() {
            *c *= m;
        }
        scorer.accumulate(traj, &coefs, &mut vector)?;
        stats.token_ratios.push(token_rho);
        stats.seq_ratios.push(seq_rho);
    }
    stats.clipped_fraction = if units == 0 { 0.0 } else { clipped as f64 / units as f64 };
    if let Some(i) = vector.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {i}")));
    }
    Ok((GradientEstimate { vector, estimator_kind: cfg.kind, batch_size: n }, stats))
}

/// Mean of `R · ∇ log π(y|x)` over trajectories sampled from π.
pub fn grad_vanilla(trajs: &[Trajectory], signals: &[f64], scorer: &dyn ScoreSource) -> Result<GradientEstimate> {
    Ok(estimate(&EstimatorConfig::new(EstimatorKind::Vanilla), trajs, signals, Mass::Mean, scorer)?.0)
}

/// Same formula as [`grad_vanilla`] on trajectories sampled from μ.
pub fn grad_actual(trajs: &[Trajectory], signals: &[f64], scorer: &dyn ScoreSource) -> Result<GradientEstimate> {
    Ok(estimate(&EstimatorConfig::new(EstimatorKind::Actual), trajs, signals, Mass::Mean, scorer)?.0)
}

pub fn grad_is(
    trajs: &[Trajectory],
    signals: &[f64],
    level: Level,
    scorer: &dyn ScoreSource,
) -> Result<(GradientEstimate, RatioStats)> {
    let kind = match level {
        Level::Token => EstimatorKind::IsToken,
        Level::Sequence => EstimatorKind::IsSeq,
    };
    estimate(&EstimatorConfig::new(kind), trajs, signals, Mass::Mean, scorer)
}

pub fn grad_tis(
    trajs: &[Trajectory],
    signals: &[f64],
    level: Level,
    c: f64,
    scorer: &dyn ScoreSource,
) -> Result<(GradientEstimate, RatioStats)> {
    let kind = match level {
        Level::Token => EstimatorKind::TisToken,
        Level::Sequence => EstimatorKind::TisSeq,
    };
    estimate(&EstimatorConfig::new(kind).with_c(c), trajs, signals, Mass::Mean, scorer)
}

pub fn grad_mis(
    trajs: &[Trajectory],
    signals: &[f64],
    level: Level,
    c: f64,
    scorer: &dyn ScoreSource,
) -> Result<(GradientEstimate, RatioStats)> {
    let kind = match level {
        Level::Token => EstimatorKind::MisToken,
        Level::Sequence => EstimatorKind::MisSeq,
    };
    estimate(&EstimatorConfig::new(kind).with_c(c), trajs, signals, Mass::Mean, scorer)
}

/// Gradient of the asymmetric clipped surrogate
/// `min(ρ_t A, clip(ρ_t, 1 − eps_low, 1 + eps_high) A)` summed over tokens and
/// averaged over the batch. Clipped terms contribute zero gradient.
pub fn ppo_clip_surrogate(
    trajs: &[Trajectory],
    advantages: &[f64],
    eps_low: f64,
    eps_high: f64,
    scorer: &dyn ScoreSource,
) -> Result<(GradientEstimate, RatioStats)> {
    check_eps(eps_low, eps_high)?;
    let cfg = EstimatorConfig { eps_low, eps_high, ..EstimatorConfig::new(EstimatorKind::PpoClip) };
    estimate(&cfg, trajs, advantages, Mass::Mean, scorer)
}

/// Per-token clipped surrogate value (for reporting).
pub fn ppo_surrogate_value(rho: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps_low, 1.0 + eps_high);
    (rho * advantage).min(clipped * advantage)
}

/// Leave-one-out advantages grouped by prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub groups: Vec<Vec<f64>>,
    pub group_size: usize,
}

/// `A_i = R_i − mean_{j≠i} R_j` for one group of `n` rollouts.
pub fn rloo_advantages(rewards: &[f64], n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::config(format!("RLOO needs at least 2 rollouts per prompt, got {n}")));
    }
    if rewards.len() != n {
        return Err(Error::contract(format!("group has {} rewards, expected {n}", rewards.len())));
    }
    let total: f64 = rewards.iter().sum();
    let others = (n - 1) as f64;
    Ok(rewards.iter().map(|&r| r - (total - r) / others).collect())
}

/// RLOO over several groups of equal size.
pub fn rloo_batch(groups: &[Vec<f64>], n: usize) -> Result<AdvantageBatch> {
    let groups = groups.iter().map(|g| rloo_advantages(g, n)).collect::<Result<Vec<_>>>()?;
    Ok(AdvantageBatch { groups, group_size: n })
}

/// Whether a group carries signal, i.e. its rewards are not all equal to the
/// same 0 or 1 value.
pub fn group_has_signal(rewards: &[u8]) -> bool {
    let ones = rewards.iter().filter(|&&r| r == 1).count();
    ones != 0 && ones != rewards.len()
}

/// Drops groups whose rewards are all 0 or all 1. Survivors are untouched and
/// keep their order. Rejecting every group is an [`Error::EmptyBatch`].
pub fn rejection_filter(groups: Vec<Vec<Trajectory>>) -> Result<Vec<Vec<Trajectory>>> {
    let kept: Vec<_> =
        groups.into_iter().filter(|g| group_has_signal(&g.iter().map(|t| t.reward).collect::<Vec<_>>())).collect();
    if kept.is_empty() {
        Err(Error::EmptyBatch)
    } else {
        Ok(kept)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Score source where token `t` of trajectory with prompt `p` has score
    /// `e_{(p * 8 + t) mod dim}` scaled by `1 + token`. Independent of any policy.
    pub(crate) struct IndicatorScores {
        pub dim: usize,
    }

    impl IndicatorScores {
        pub(crate) fn score(&self, traj: &Trajectory, t: usize) -> (usize, f64) {
            ((traj.prompt as usize * 8 + t) % self.dim, 1.0 + traj.tokens[t] as f64)
        }
    }

    impl ScoreSource for IndicatorScores {
        fn param_count(&self) -> usize {
            self.dim
        }

        fn accumulate(&self, traj: &Trajectory, coefs: &[f64], out: &mut [f64]) -> Result<()> {
            for (t, &c) in coefs.iter().enumerate() {
                let (k, v) = self.score(traj, t);
                out[k] += c * v;
            }
            Ok(())
        }
    }

    pub(crate) fn traj(prompt: u32, tokens: &[u32], lp: &[f64], lm: &[f64], reward: u8) -> Trajectory {
        Trajectory {
            prompt,
            tokens: tokens.to_vec(),
            logprob_train: lp.to_vec(),
            logprob_rollout: lm.to_vec(),
            reward,
            truncated: false,
            entropy_sum: 0.0,
        }
    }

    fn batch() -> Vec<Trajectory> {
        vec![
            traj(0, &[1, 2], &[-0.5, -1.0], &[-0.6, -0.8], 1),
            traj(1, &[0], &[-0.1], &[-0.1], 0),
            traj(2, &[3, 1, 0], &[-1.2, -0.3, -0.2], &[-1.0, -0.4, -0.9], 1),
        ]
    }

    fn rewards(b: &[Trajectory]) -> Vec<f64> {
        b.iter().map(|t| t.reward as f64).collect()
    }

    #[test]
    fn zero_rewards_zero_gradient() {
        let b = batch();
        let s = IndicatorScores { dim: 16 };
        let g = grad_vanilla(&b, &[0.0; 3], &s).unwrap();
        assert!(g.vector.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vanilla_is_mean_of_reward_weighted_token_scores() {
        let b = batch();
        let s = IndicatorScores { dim: 16 };
        let g = grad_vanilla(&b, &rewards(&b), &s).unwrap();
        let mut expect = vec![0.0; 16];
        for tr in &b {
            for t in 0..tr.len() {
                let (k, v) = s.score(tr, t);
                expect[k] += tr.reward as f64 * v / 3.0;
            }
        }
        for (a, e) in g.vector.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn matched_engines_collapse_every_variant_to_actual() {
        let b: Vec<_> = batch()
            .into_iter()
            .map(|mut t| {
                t.logprob_rollout = t.logprob_train.clone();
                t
            })
            .collect();
        let s = IndicatorScores { dim: 16 };
        let r = rewards(&b);
        let base = grad_actual(&b, &r, &s).unwrap().vector;
        assert_eq!(grad_vanilla(&b, &r, &s).unwrap().vector, base);
        for level in [Level::Token, Level::Sequence] {
            let (g, st) = grad_is(&b, &r, level, &s).unwrap();
            assert_eq!(g.vector, base);
            assert!(st.seq_ratios.iter().all(|&x| x == 1.0));
            assert_eq!(grad_tis(&b, &r, level, 2.0, &s).unwrap().0.vector, base);
            assert_eq!(grad_mis(&b, &r, level, 2.0, &s).unwrap().0.vector, base);
            assert_eq!(grad_tis(&b, &r, level, 1.0, &s).unwrap().0.vector, base);
        }
    }

    #[test]
    fn infinite_threshold_recovers_is() {
        let b = batch();
        let s = IndicatorScores { dim: 16 };
        let r = rewards(&b);
        for level in [Level::Token, Level::Sequence] {
            let is = grad_is(&b, &r, level, &s).unwrap().0.vector;
            assert_eq!(grad_tis(&b, &r, level, f64::INFINITY, &s).unwrap().0.vector, is);
            assert_eq!(grad_mis(&b, &r, level, f64::INFINITY, &s).unwrap().0.vector, is);
            // Thresholds above every ratio also change nothing.
            assert_eq!(grad_tis(&b, &r, level, 1e6, &s).unwrap().0.vector, is);
        }
    }

    #[test]
    fn tis_caps_a_large_ratio_at_c() {
        // Sequence ratio exp(ln 5) = 5 on the first trajectory, 1 on the second.
        let b = vec![traj(0, &[1], &[5f64.ln() - 2.0], &[-2.0], 1), traj(1, &[2], &[-0.7], &[-0.7], 1)];
        let s = IndicatorScores { dim: 16 };
        let (g, st) = grad_tis(&b, &[1.0, 1.0], Level::Sequence, 2.0, &s).unwrap();
        assert!((st.seq_ratios[0] - 5.0).abs() < 1e-12);
        assert_eq!(st.clipped_fraction, 0.5);
        // Manual weighted sum: weights 2 and 1, mean over 2.
        let mut expect = vec![0.0; 16];
        let (k0, v0) = s.score(&b[0], 0);
        let (k1, v1) = s.score(&b[1], 0);
        expect[k0] += 2.0 * v0 / 2.0;
        expect[k1] += 1.0 * v1 / 2.0;
        for (a, e) in g.vector.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn mis_fully_masked_is_zero() {
        let b = vec![traj(0, &[1, 1], &[-0.1, -0.1], &[-3.0, -3.0], 1)];
        let s = IndicatorScores { dim: 8 };
        for level in [Level::Token, Level::Sequence] {
            let (g, st) = grad_mis(&b, &[1.0], level, 2.0, &s).unwrap();
            assert!(g.vector.iter().all(|&x| x == 0.0));
            assert_eq!(st.clipped_fraction, 1.0);
        }
    }

    #[test]
    fn mis_equals_removal_of_offending_trajectories() {
        let b = vec![
            traj(0, &[1, 2], &[-0.2, -0.3], &[-0.25, -0.35], 1),
            traj(1, &[2], &[-0.1], &[-2.5], 1), // ratio e^2.4 > 2
            traj(2, &[3, 3], &[-0.4, -0.4], &[-0.3, -0.6], 1),
        ];
        let s = IndicatorScores { dim: 32 };
        let r = [1.0, 1.0, 1.0];
        let (mis, _) = grad_mis(&b, &r, Level::Sequence, 2.0, &s).unwrap();
        // Same normaliser N = 3, only the kept trajectories summed.
        let kept = [b[0].clone(), b[2].clone()];
        let (is_kept, _) = estimate(
            &EstimatorConfig::new(EstimatorKind::IsSeq),
            &kept,
            &[1.0, 1.0],
            Mass::Weights(&[1.0 / 3.0, 1.0 / 3.0]),
            &s,
        )
        .unwrap();
        for (a, e) in mis.vector.iter().zip(&is_kept.vector) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_must_be_positive() {
        let b = batch();
        let s = IndicatorScores { dim: 16 };
        assert!(matches!(grad_tis(&b, &[1.0; 3], Level::Token, 0.0, &s), Err(Error::Config(_))));
        assert!(matches!(grad_mis(&b, &[1.0; 3], Level::Token, -1.0, &s), Err(Error::Config(_))));
    }

    #[test]
    fn empty_batch_signalled() {
        let s = IndicatorScores { dim: 4 };
        assert!(matches!(grad_vanilla(&[], &[], &s), Err(Error::EmptyBatch)));
    }

    #[test]
    fn log_ratio_guard_saturates() {
        let b = vec![traj(0, &[1], &[-0.1], &[-400.0], 1)];
        let s = IndicatorScores { dim: 4 };
        let (_, st) = grad_is(&b, &[1.0], Level::Token, &s).unwrap();
        assert_eq!(st.token_ratios[0][0], 50f64.exp());
        assert!(st.saturated >= 1);
    }

    #[test]
    fn seq_ratio_is_product_of_token_ratios() {
        let b = batch();
        let s = IndicatorScores { dim: 16 };
        let (_, st) = grad_is(&b, &rewards(&b), Level::Sequence, &s).unwrap();
        for (tok, seq) in st.token_ratios.iter().zip(&st.seq_ratios) {
            let log_prod: f64 = tok.iter().map(|r| r.ln()).sum();
            assert!((log_prod - seq.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rloo_examples() {
        let a = rloo_advantages(&[1.0, 0.0, 0.0, 1.0], 4).unwrap();
        let e = [2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0];
        for (x, y) in a.iter().zip(&e) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(rloo_advantages(&[1.0; 5], 5).unwrap(), vec![0.0; 5]);
        assert!(matches!(rloo_advantages(&[1.0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn rejection_filter_examples() {
        let g = |rs: &[u8]| rs.iter().map(|&r| traj(0, &[0], &[-0.1], &[-0.1], r)).collect::<Vec<_>>();
        let kept = rejection_filter(vec![g(&[1, 1, 1, 1]), g(&[0, 0, 0, 0]), g(&[1, 0, 1, 1])]).unwrap();
        assert_eq!(kept, vec![g(&[1, 0, 1, 1])]);
        assert!(matches!(rejection_filter(vec![g(&[1, 1]), g(&[0, 0])]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn ppo_unit_ratios_reduce_to_advantage_weighted_vanilla() {
        let b: Vec<_> = batch()
            .into_iter()
            .map(|mut t| {
                t.logprob_rollout = t.logprob_train.clone();
                t
            })
            .collect();
        let s = IndicatorScores { dim: 16 };
        let adv = [0.5, -0.25, 0.75];
        let (g, st) = ppo_clip_surrogate(&b, &adv, 0.2, 0.28, &s).unwrap();
        assert_eq!(g.vector, grad_vanilla(&b, &adv, &s).unwrap().vector);
        assert_eq!(st.clipped_fraction, 0.0);
    }

    /// Two-branch formula for one token: unclipped branch gives `A ρ ∇log π`,
    /// the clipped branch is constant in θ.
    fn branch_oracle(rho: f64, adv: f64, lo: f64, hi: f64) -> (f64, f64) {
        let unclipped = rho * adv;
        let clipped = rho.max(1.0 - lo).min(1.0 + hi) * adv;
        if unclipped <= clipped {
            (unclipped, adv * rho)
        } else {
            (clipped, 0.0)
        }
    }

    #[test]
    fn ppo_clipping_branches() {
        let s = IndicatorScores { dim: 8 };
        for (rho, adv, frac) in
            [(1.5f64, 1.0, 1.0), (0.7, -1.0, 1.0), (1.1, 1.0, 0.0), (0.7, 1.0, 0.0), (1.5, -1.0, 0.0)]
        {
            let b = vec![traj(0, &[1], &[rho.ln() - 1.0], &[-1.0], 1)];
            let (g, st) = ppo_clip_surrogate(&b, &[adv], 0.2, 0.28, &s).unwrap();
            let (value, coef) = branch_oracle(rho, adv, 0.2, 0.28);
            let (k, v) = s.score(&b[0], 0);
            assert!((g.vector[k] - coef * v).abs() < 1e-12, "rho {rho} adv {adv}");
            assert_eq!(st.clipped_fraction, frac);
            assert!((ppo_surrogate_value(rho, adv, 0.2, 0.28) - value).abs() < 1e-15);
        }
        // Clipped constants from the examples.
        assert!((ppo_surrogate_value(1.5, 1.0, 0.2, 0.28) - 1.28).abs() < 1e-15);
        assert!((ppo_surrogate_value(0.7, -1.0, 0.2, 0.28) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn ppo_eps_range_checked() {
        let b = batch();
        let s = IndicatorScores { dim: 16 };
        assert!(ppo_clip_surrogate(&b, &[1.0; 3], 0.0, 0.28, &s).is_err());
        assert!(ppo_clip_surrogate(&b, &[1.0; 3], 0.2, 1.0, &s).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rloo_zero_sum(rs in proptest::collection::vec(0u8..=1, 2..32)) {
                let r: Vec<f64> = rs.iter().map(|&x| x as f64).collect();
                let a = rloo_advantages(&r, r.len()).unwrap();
                prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
            }

            #[test]
            fn rloo_scales_linearly(rs in proptest::collection::vec(0u8..=1, 2..16), k in 0.1f64..10.0) {
                let r: Vec<f64> = rs.iter().map(|&x| x as f64).collect();
                let rk: Vec<f64> = r.iter().map(|x| x * k).collect();
                let a = rloo_advantages(&r, r.len()).unwrap();
                let ak = rloo_advantages(&rk, r.len()).unwrap();
                for (x, y) in a.iter().zip(&ak) {
                    prop_assert!((x * k - y).abs() < 1e-12);
                }
            }
        }
    }
}
