//! Experiment driver: configuration, the training loop, metric persistence
//! and the comparison suites.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorConfig, EstimatorKind, Mass};
use crate::monitor::{self, detect_surge, Ema, MetricsRecord, SurgeDetectorState};
use crate::numerics::{hash_words, l2_norm};
use crate::policy::{
    sample_trajectory, FeatureKind, FeatureMap, MismatchMode, MismatchSpec, PolicyParams, TrainScorer, Trajectory,
};
use crate::scheduler::{SchedulerConfig, SchedulerMode};
use crate::toyenv::{EnvSpec, Environment, SyntheticTask};

/// Environment variable that overrides `seed` in configs loaded by the CLI.
pub const SEED_ENV_VAR: &str = "MISMATCH_LAB_SEED";

/// Serde helper for thresholds that may be infinite. Finite values are plain
/// numbers; infinity is written as the string `"inf"`.
pub mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom(format!("unsupported threshold {v}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "+inf" | "infinity" | "Infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// How the policy is parameterised and initialised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub feature_kind: FeatureKind,
    /// Width of hashed features (ignored for one-hot).
    #[serde(default = "default_hashed_dim")]
    pub hashed_dim: usize,
    /// Positions distinguished by the one-hot layout.
    #[serde(default = "default_positions")]
    pub positions: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
    /// Standard deviation of the Gaussian initial weights.
    #[serde(default)]
    pub init_scale: f64,
    /// Initial logit offset of EOS through the bias feature.
    #[serde(default)]
    pub eos_logit: f64,
    #[serde(default)]
    pub feature_seed: u64,
}

fn default_hashed_dim() -> usize {
    16
}
fn default_positions() -> usize {
    8
}
fn default_true() -> bool {
    true
}

impl PolicyConfig {
    pub fn feature_map(&self, env: &dyn Environment) -> FeatureMap {
        match self.feature_kind {
            FeatureKind::OneHot => FeatureMap::one_hot(env.vocab_size(), self.positions, env.num_prompts(), self.bias),
            FeatureKind::Hashed => FeatureMap::hashed(self.hashed_dim, self.positions, self.feature_seed, self.bias),
        }
    }

    pub fn init_params(&self, env: &dyn Environment, seed: u64) -> Result<PolicyParams> {
        let fm = self.feature_map(env);
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(seed, [0x1417]));
        let mut params = if self.init_scale > 0.0 {
            PolicyParams::random(fm, env.vocab_size(), self.init_scale, &mut rng)?
        } else {
            PolicyParams::zeros(fm, env.vocab_size())?
        };
        if self.eos_logit != 0.0 {
            let eos = env.eos_token().ok_or_else(|| Error::config("eos_logit needs an environment with EOS"))?;
            params.add_bias_logit(eos as usize, self.eos_logit)?;
        }
        Ok(params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_surge_factor")]
    pub factor: f64,
}

fn default_window() -> usize {
    20
}
fn default_surge_factor() -> f64 {
    2.5
}

impl Default for SurgeConfig {
    fn default() -> Self {
        SurgeConfig { window: default_window(), factor: default_surge_factor() }
    }
}

/// Collapse rule: the reward EMA stays below `fraction × running peak` for
/// `patience` consecutive steps, once the peak has reached `min_peak`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    #[serde(default = "default_collapse_fraction")]
    pub fraction: f64,
    #[serde(default = "default_collapse_patience")]
    pub patience: u64,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default = "default_min_peak")]
    pub min_peak: f64,
    #[serde(default)]
    pub stop_on_collapse: bool,
}

fn default_collapse_fraction() -> f64 {
    0.5
}
fn default_collapse_patience() -> u64 {
    20
}
fn default_smoothing() -> f64 {
    0.9
}
fn default_min_peak() -> f64 {
    0.05
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            fraction: default_collapse_fraction(),
            patience: default_collapse_patience(),
            smoothing: default_smoothing(),
            min_peak: default_min_peak(),
            stop_on_collapse: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub mismatch: MismatchSpec,
    pub estimator: EstimatorConfig,
    pub scheduler: SchedulerConfig,
    /// Prompts per step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// `n`, rollouts per prompt.
    #[serde(default = "default_rollouts")]
    pub rollouts_per_prompt: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip_threshold: f64,
    pub total_steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Leading fraction of the prompt set used for training; the rest is
    /// held out.
    #[serde(default = "default_fraction")]
    pub dataset_fraction: f64,
    #[serde(default)]
    pub surge: SurgeConfig,
    #[serde(default)]
    pub collapse: CollapseConfig,
    /// Consecutive all-rejected steps tolerated before the run stalls.
    #[serde(default = "default_empty_patience")]
    pub empty_batch_patience: u64,
    #[serde(default = "default_smoothing")]
    pub grad_norm_smoothing: f64,
    /// Trajectories sampled for the final held-out reward.
    #[serde(default = "default_eval_rollouts")]
    pub eval_rollouts: usize,
}

fn default_batch_size() -> usize {
    64
}
fn default_rollouts() -> usize {
    16
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_fraction() -> f64 {
    1.0
}
fn default_empty_patience() -> u64 {
    50
}
fn default_eval_rollouts() -> usize {
    256
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.mismatch.validate()?;
        self.estimator.validate()?;
        self.scheduler.build()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.rollouts_per_prompt < 2 {
            return Err(Error::config("rollouts_per_prompt must be at least 2"));
        }
        if !(self.grad_clip_threshold > 0.0) {
            return Err(Error::config("grad_clip_threshold must be positive"));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return Err(Error::config(format!("dataset_fraction must lie in (0, 1], got {}", self.dataset_fraction)));
        }
        if self.surge.window == 0 || !(self.surge.factor > 0.0) {
            return Err(Error::config("surge window and factor must be positive"));
        }
        let c = &self.collapse;
        if !(c.fraction > 0.0 && c.fraction < 1.0) || c.patience == 0 || !(c.smoothing > 0.0 && c.smoothing < 1.0) {
            return Err(Error::config("collapse fraction and smoothing must lie in (0, 1), patience positive"));
        }
        if !(self.grad_norm_smoothing > 0.0 && self.grad_norm_smoothing < 1.0) {
            return Err(Error::config("grad_norm_smoothing must lie in (0, 1)"));
        }
        if self.policy.feature_kind == FeatureKind::OneHot
            && self.mismatch.mismatch_mode == MismatchMode::ReductionOrder
        {
            return Err(Error::config(
                "reduction-order mismatch needs hashed features; one-hot logits are a single product",
            ));
        }
        Ok(())
    }

    /// Number of prompts available for training.
    pub fn training_prompts(&self) -> usize {
        let total = self.env.as_env().num_prompts();
        ((total as f64 * self.dataset_fraction).ceil() as usize).clamp(1, total)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    /// Applies the seed override from [`SEED_ENV_VAR`] if set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV_VAR) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV_VAR}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Collapsed,
    EmptyBatchStall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_run: u64,
    pub peak_reward_ema: f64,
    /// Mean `log_ppl_abs_diff` over the last [`FINAL_WINDOW`] steps.
    pub final_mismatch: f64,
    pub final_reward_ema: f64,
    pub collapse_step: Option<u64>,
    pub surge_step: Option<u64>,
    pub t_decay: Option<u64>,
    /// Reward on prompts outside the training fraction (all prompts when the
    /// fraction is 1).
    pub heldout_reward: f64,
}

/// Steps averaged for [`RunSummary::final_mismatch`].
pub const FINAL_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Execution options that must not affect results.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Rollout worker threads; `None` uses rayon's global pool.
    pub threads: Option<usize>,
}

pub struct TrainOutcome {
    pub log: RunLog,
    pub params: PolicyParams,
}

/// Rescales `v` to norm `threshold` if it is longer.
pub fn grad_clip(v: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = l2_norm(v);
    if norm > threshold {
        let s = threshold / norm;
        Ok(v.iter().map(|x| x * s).collect())
    } else {
        Ok(v.to_vec())
    }
}

/// Tracks the operational collapse rule.
#[derive(Clone, Debug)]
pub struct CollapseTracker {
    cfg: CollapseConfig,
    ema: Ema,
    peak: f64,
    streak_start: Option<u64>,
    pub collapse_step: Option<u64>,
}

impl CollapseTracker {
    pub fn new(cfg: CollapseConfig) -> Result<Self> {
        Ok(CollapseTracker { ema: Ema::new(cfg.smoothing)?, cfg, peak: 0.0, streak_start: None, collapse_step: None })
    }

    /// Feeds one step's reward mean and returns the updated EMA.
    pub fn update(&mut self, step: u64, reward_mean: f64) -> f64 {
        let v = self.ema.update(reward_mean);
        self.peak = self.peak.max(v);
        if self.collapse_step.is_none() {
            if self.peak >= self.cfg.min_peak && v < self.cfg.fraction * self.peak {
                let start = *self.streak_start.get_or_insert(step);
                if step + 1 - start >= self.cfg.patience {
                    self.collapse_step = Some(start);
                }
            } else {
                self.streak_start = None;
            }
        }
        v
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }
}

fn trajectory_rng(seed: u64, step: u64, slot: usize, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_words(seed, [step, slot as u64, k as u64]))
}

/// Samples `batch_size` groups of `n` rollouts. Work is spread over the
/// current rayon pool; output order is fixed by `(slot, k)`.
fn sample_groups(
    cfg: &ExperimentConfig,
    params: &PolicyParams,
    prompts: &[u32],
    step: u64,
) -> Result<Vec<Vec<Trajectory>>> {
    let env = cfg.env.as_env();
    let (rollout, train) = (cfg.mismatch.rollout(), cfg.mismatch.train());
    let n = cfg.rollouts_per_prompt;
    let flat: Vec<Trajectory> = (0..prompts.len() * n)
        .into_par_iter()
        .map(|i| {
            let (slot, k) = (i / n, i % n);
            let mut rng = trajectory_rng(cfg.seed, step, slot, k);
            sample_trajectory(params, &rollout, &train, env, prompts[slot], &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut it = flat.into_iter();
    Ok((0..prompts.len()).map(|_| it.by_ref().take(n).collect()).collect())
}

fn draw_prompts(seed: u64, step: u64, batch: usize, available: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_words(seed, [step, u64::MAX]));
    (0..batch).map(|_| rng.gen_range(0..available as u32)).collect()
}

fn heldout_reward(cfg: &ExperimentConfig, params: &PolicyParams) -> Result<f64> {
    let env = cfg.env.as_env();
    let total = env.num_prompts();
    let start = cfg.training_prompts();
    let pool: Vec<u32> =
        if start < total { (start as u32..total as u32).collect() } else { (0..total as u32).collect() };
    let (rollout, train) = (cfg.mismatch.rollout(), cfg.mismatch.train());
    let rewards: Vec<u8> = (0..cfg.eval_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(cfg.seed, u64::MAX, i, 0);
            let prompt = pool[i % pool.len()];
            sample_trajectory(params, &rollout, &train, env, prompt, &mut rng).map(|t| t.reward)
        })
        .collect::<Result<_>>()?;
    Ok(if rewards.is_empty() { 0.0 } else { rewards.iter().map(|&r| r as f64).sum::<f64>() / rewards.len() as f64 })
}

pub fn train(config: &ExperimentConfig) -> Result<RunLog> {
    Ok(train_with(config, RunOptions::default())?.log)
}

pub fn train_with(config: &ExperimentConfig, opts: RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    match opts.threads {
        None => run(config),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| run(config)),
    }
}

fn run(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let env = cfg.env.as_env();
    let mut params = cfg.policy.init_params(env, cfg.seed)?;
    let mut scheduler = cfg.scheduler.build()?;
    let mut surge = SurgeDetectorState::new(cfg.surge.window, cfg.surge.factor)?;
    let mut collapse = CollapseTracker::new(cfg.collapse)?;
    let mut grad_ema = Ema::new(cfg.grad_norm_smoothing)?;
    let train_engine = cfg.mismatch.train();
    let available = cfg.training_prompts();
    let n = cfg.rollouts_per_prompt;
    let mut records = Vec::with_capacity(cfg.total_steps as usize);
    let mut empty_streak = 0u64;
    let mut status = RunStatus::Completed;

    for step in 1..=cfg.total_steps {
        let prompts = draw_prompts(cfg.seed, step, cfg.batch_size, available);
        let groups = sample_groups(cfg, &params, &prompts, step)?;
        let all: Vec<&Trajectory> = groups.iter().flatten().collect();
        let count = all.len() as f64;
        let avg_len = all.iter().map(|t| t.len() as f64).sum::<f64>() / count;
        let reward_mean = all.iter().map(|t| t.reward as f64).sum::<f64>() / count;
        let truncated_fraction = all.iter().filter(|t| t.truncated).count() as f64 / count;
        let owned: Vec<Trajectory> = all.into_iter().cloned().collect();
        let mismatch = monitor::mismatch_indicator(&owned)?;
        let entropy = monitor::mean_token_entropy(&owned);
        drop(owned);

        surge = detect_surge(surge, step, avg_len);
        if scheduler.mode == SchedulerMode::Adaptive && !scheduler.armed() {
            if let Some(s) = surge.surge_step {
                scheduler.arm_from_surge(s)?;
            }
        }
        let lr = scheduler.advance(step)?;

        let (grad_norm, clipped_fraction, surviving) = match estimators::rejection_filter(groups) {
            Err(Error::EmptyBatch) => {
                empty_streak += 1;
                (0.0, 0.0, 0)
            }
            Err(e) => return Err(e),
            Ok(kept) => {
                empty_streak = 0;
                let rewards: Vec<Vec<f64>> = kept.iter().map(|g| g.iter().map(|t| t.reward as f64).collect()).collect();
                let adv = estimators::rloo_batch(&rewards, n)?;
                let trajs: Vec<Trajectory> = kept.iter().flatten().cloned().collect();
                let signals: Vec<f64> = adv.groups.into_iter().flatten().collect();
                let scorer = TrainScorer::new(&params, train_engine);
                let (g, stats) = estimators::estimate(&cfg.estimator, &trajs, &signals, Mass::Mean, &scorer)?;
                let norm = g.norm();
                let step_dir = grad_clip(&g.vector, cfg.grad_clip_threshold)?;
                for (w, d) in params.theta.iter_mut().zip(&step_dir) {
                    *w += lr * d;
                }
                params.check_finite()?;
                (norm, stats.clipped_fraction, kept.len() as u64)
            }
        };

        let reward_ema = collapse.update(step, reward_mean);
        let record = MetricsRecord {
            step,
            avg_response_length: avg_len,
            log_ppl_abs_diff: mismatch,
            grad_norm,
            grad_norm_smoothed: grad_ema.update(grad_norm),
            learning_rate: lr,
            reward_mean,
            masked_or_clipped_fraction: clipped_fraction,
            entropy,
            reward_ema,
            truncated_fraction,
            surviving_groups: surviving,
        };
        if !record.all_finite() {
            return Err(Error::Numeric(format!("non-finite metric at step {step}")));
        }
        records.push(record);

        if empty_streak > cfg.empty_batch_patience {
            status = RunStatus::EmptyBatchStall;
            break;
        }
        if collapse.collapse_step.is_some() && cfg.collapse.stop_on_collapse {
            break;
        }
    }
    if status == RunStatus::Completed && collapse.collapse_step.is_some() {
        status = RunStatus::Collapsed;
    }

    let tail = &records[records.len().saturating_sub(FINAL_WINDOW)..];
    let summary = RunSummary {
        steps_run: records.len() as u64,
        peak_reward_ema: collapse.peak(),
        final_mismatch: if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|r| r.log_ppl_abs_diff).sum::<f64>() / tail.len() as f64
        },
        final_reward_ema: records.last().map_or(0.0, |r| r.reward_ema),
        collapse_step: collapse.collapse_step,
        surge_step: surge.surge_step,
        t_decay: scheduler.t_decay,
        heldout_reward: heldout_reward(cfg, &params)?,
    };
    Ok(TrainOutcome { log: RunLog { config: cfg.clone(), status, summary, records }, params })
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(MetricsRecord::CSV_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `metrics.jsonl`, `runlog.json` and `params.bin`
/// into `dir`.
pub fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &outcome.log.records)?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &outcome.log.records)?;
    fs::write(dir.join("runlog.json"), outcome.log.to_json()?)?;
    outcome.params.write_binary(BufWriter::new(File::create(dir.join("params.bin"))?))?;
    Ok(())
}

pub const SUITES: [&str; 5] =
    ["baseline-vs-scheduler", "decay-period-sweep", "is-ablation", "precision-ablation", "dataset-fraction"];

/// The synthetic-task configuration the suites start from: a constant
/// learning rate and bf16-like rollout arithmetic.
pub fn base_config() -> ExperimentConfig {
    ExperimentConfig {
        env: EnvSpec::Synthetic(SyntheticTask {
            vocab_size: 4,
            max_response_length: 48,
            num_prompts: 64,
            target_predicate: crate::toyenv::Predicate::Count,
            length_bias: 3.0,
        }),
        policy: PolicyConfig {
            feature_kind: FeatureKind::Hashed,
            hashed_dim: 16,
            positions: 8,
            bias: true,
            init_scale: 0.0,
            eos_logit: 1.0,
            feature_seed: 7,
        },
        mismatch: MismatchSpec::precision(crate::numerics::Precision::Bf16Like),
        estimator: EstimatorConfig::new(EstimatorKind::Actual),
        scheduler: SchedulerConfig {
            mode: SchedulerMode::Constant,
            eta_0: 64.0,
            floor_ratio: 0.1,
            t_decay: None,
            heuristic_factor: 1.8,
        },
        batch_size: 32,
        rollouts_per_prompt: 8,
        grad_clip_threshold: 1.0,
        total_steps: 300,
        seed: 2,
        dataset_fraction: 1.0,
        surge: SurgeConfig::default(),
        collapse: CollapseConfig::default(),
        empty_batch_patience: 50,
        grad_norm_smoothing: 0.9,
        eval_rollouts: 256,
    }
}

/// Same run with the adaptive length-triggered scheduler.
pub fn with_adaptive_scheduler(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.scheduler.mode = SchedulerMode::Adaptive;
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub label: String,
    pub status: RunStatus,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub runs: Vec<SuiteRun>,
    /// Suite-specific ordinal checks.
    pub checks: Vec<(String, bool)>,
}

fn suite_matrix(name: &str, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut runs = Vec::new();
    match name {
        "baseline-vs-scheduler" => {
            runs.push(("constant-lr".to_string(), base.clone()));
            runs.push(("length-decay".to_string(), with_adaptive_scheduler(base.clone())));
        }
        "decay-period-sweep" => {
            runs.push(("constant-lr".to_string(), base.clone()));
            for t in [25, 50, 100, 200] {
                let mut c = base.clone();
                c.scheduler.mode = SchedulerMode::Static;
                c.scheduler.t_decay = Some(t);
                runs.push((format!("t-decay-{t}"), c));
            }
            runs.push(("adaptive".to_string(), with_adaptive_scheduler(base.clone())));
        }
        "is-ablation" => {
            for (label, est) in [
                ("no-is", EstimatorConfig::new(EstimatorKind::Actual)),
                ("token-tis-c2", EstimatorConfig::new(EstimatorKind::TisToken)),
                ("token-mis-c2", EstimatorConfig::new(EstimatorKind::MisToken)),
                ("seq-tis-c2", EstimatorConfig::new(EstimatorKind::TisSeq)),
                ("seq-mis-c2", EstimatorConfig::new(EstimatorKind::MisSeq)),
            ] {
                let mut c = base.clone();
                c.estimator = est;
                runs.push((label.to_string(), c));
            }
        }
        "precision-ablation" => {
            for (label, prec) in [
                ("bf16-like", crate::numerics::Precision::Bf16Like),
                ("fp16-like", crate::numerics::Precision::Fp16Like),
            ] {
                let mut c = base.clone();
                c.policy.feature_kind = FeatureKind::Hashed;
                c.mismatch = MismatchSpec::precision(prec);
                runs.push((label.to_string(), c));
            }
        }
        "dataset-fraction" => {
            for f in [1.0, 0.25] {
                let mut c = base.clone();
                c.dataset_fraction = f;
                runs.push((format!("fraction-{f}"), c));
            }
        }
        other => return Err(Error::UnknownSuite(other.to_string())),
    }
    Ok(runs)
}

fn suite_checks(name: &str, runs: &[SuiteRun]) -> Vec<(String, bool)> {
    let mut checks = Vec::new();
    match name {
        "baseline-vs-scheduler" => {
            let (b, s) = (&runs[0], &runs[1]);
            checks.push(("baseline collapsed".into(), b.summary.collapse_step.is_some()));
            checks.push(("scheduler did not collapse".into(), s.summary.collapse_step.is_none()));
            checks.push((
                "scheduler final mismatch below baseline".into(),
                s.summary.final_mismatch < b.summary.final_mismatch,
            ));
        }
        "dataset-fraction" => {
            let (a, b) = (&runs[0].summary, &runs[1].summary);
            if let (Some(x), Some(y)) = (a.collapse_step, b.collapse_step) {
                let ratio = x.max(y) as f64 / x.min(y).max(1) as f64;
                checks.push(("collapse steps differ by less than 4x".into(), ratio < 4.0));
            }
        }
        "precision-ablation" => {
            let (bf, fp) = (&runs[0].summary, &runs[1].summary);
            checks.push(("fp16-like mismatch below bf16-like".into(), fp.final_mismatch < bf.final_mismatch));
        }
        _ => {}
    }
    checks.push(("every run has one finite record per step".into(), runs.iter().all(|r| r.summary.steps_run > 0)));
    checks
}

/// Runs a named suite starting from `base`. When `out` is given, each run's
/// outputs go to `out/<label>/`, plus `summary.json` and `summary.csv`.
pub fn run_suite_with(
    name: &str,
    base: &ExperimentConfig,
    out: Option<&Path>,
    opts: RunOptions,
) -> Result<SuiteReport> {
    let matrix = suite_matrix(name, base)?;
    let mut runs = Vec::with_capacity(matrix.len());
    for (label, cfg) in matrix {
        let outcome = train_with(&cfg, opts)?;
        if let Some(dir) = out {
            write_outputs(&dir.join(&label), &outcome)?;
        }
        runs.push(SuiteRun { label, status: outcome.log.status, summary: outcome.log.summary });
    }
    let report = SuiteReport { suite: name.to_string(), checks: suite_checks(name, &runs), runs };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record([
            "label",
            "status",
            "steps_run",
            "peak_reward_ema",
            "final_mismatch",
            "final_reward_ema",
            "collapse_step",
            "surge_step",
            "t_decay",
            "heldout_reward",
        ])?;
        let opt = |v: Option<u64>| v.map_or(String::new(), |x| x.to_string());
        for r in &report.runs {
            let s = &r.summary;
            w.write_record([
                r.label.clone(),
                serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string(),
                s.steps_run.to_string(),
                s.peak_reward_ema.to_string(),
                s.final_mismatch.to_string(),
                s.final_reward_ema.to_string(),
                opt(s.collapse_step),
                opt(s.surge_step),
                opt(s.t_decay),
                s.heldout_reward.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(report)
}

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    run_suite_with(name, &base_config(), None, RunOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = base_config();
        c.env = EnvSpec::Synthetic(SyntheticTask {
            vocab_size: 3,
            max_response_length: 12,
            num_prompts: 8,
            target_predicate: crate::toyenv::Predicate::Count,
            length_bias: 0.5,
        });
        c.batch_size = 8;
        c.rollouts_per_prompt = 4;
        c.total_steps = 15;
        c.eval_rollouts = 16;
        c
    }

    #[test]
    fn clip_examples() {
        assert_eq!(grad_clip(&[0.3, 0.4], 1.0).unwrap(), vec![0.3, 0.4]);
        let v = grad_clip(&[0.0, 4.0], 1.0).unwrap();
        assert_eq!(v, vec![0.0, 1.0]);
        assert!(grad_clip(&[1.0], 0.0).is_err());
    }

    #[test]
    fn zero_steps_is_empty_and_completed() {
        let mut c = small();
        c.total_steps = 0;
        let log = train(&c).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(log.status, RunStatus::Completed);
    }

    #[test]
    fn replay_is_identical() {
        let c = small();
        let a = train_with(&c, RunOptions { threads: Some(1) }).unwrap();
        let b = train_with(&c, RunOptions { threads: Some(3) }).unwrap();
        assert_eq!(a.log.to_json().unwrap(), b.log.to_json().unwrap());
        assert_eq!(a.params.theta, b.params.theta);
    }

    #[test]
    fn records_complete_and_update_bounded() {
        let c = small();
        let log = train(&c).unwrap();
        assert_eq!(log.records.len(), 15);
        for (i, r) in log.records.iter().enumerate() {
            assert_eq!(r.step, i as u64 + 1);
            assert!(r.all_finite());
        }
    }

    #[test]
    fn collapse_rule() {
        let mut t = CollapseTracker::new(CollapseConfig { smoothing: 0.5, patience: 3, ..Default::default() }).unwrap();
        for s in 1..=5 {
            t.update(s, 1.0);
        }
        for s in 6..=20 {
            t.update(s, 0.0);
        }
        // EMA after k zeros is 0.5^k; below 0.5 from the second zero (step 7).
        assert_eq!(t.collapse_step, Some(7));
        let mut never = CollapseTracker::new(CollapseConfig::default()).unwrap();
        for s in 1..100 {
            never.update(s, 0.01);
        }
        assert_eq!(never.collapse_step, None);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.dataset_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.policy.feature_kind = FeatureKind::OneHot;
        c.mismatch.mismatch_mode = MismatchMode::ReductionOrder;
        assert!(c.validate().is_err());
        let mut c = small();
        c.rollouts_per_prompt = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_with_infinite_threshold() {
        let mut c = small();
        c.estimator = EstimatorConfig::new(EstimatorKind::TisToken).with_c(f64::INFINITY);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(ExperimentConfig::from_json_str(&s).unwrap(), c);
    }

    #[test]
    fn unknown_suite() {
        assert!(matches!(run_suite("nope"), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn training_prompt_count() {
        let mut c = base_config();
        c.dataset_fraction = 0.25;
        assert_eq!(c.training_prompts(), 16);
    }
}
