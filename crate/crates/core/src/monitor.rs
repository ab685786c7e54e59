//! Training diagnostics: log perplexity, the mismatch indicator, smoothed
//! gradient norm, entropy and the response-length surge detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::median;
use crate::policy::{EngineKind, Trajectory};

/// One row of the per-step metrics log. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub avg_response_length: f64,
    pub log_ppl_abs_diff: f64,
    /// L2 norm of the estimator output before clipping.
    pub grad_norm: f64,
    pub grad_norm_smoothed: f64,
    pub learning_rate: f64,
    pub reward_mean: f64,
    pub masked_or_clipped_fraction: f64,
    /// Mean per-token entropy of the training engine, in nats.
    pub entropy: f64,
    pub reward_ema: f64,
    pub truncated_fraction: f64,
    pub surviving_groups: u64,
}

impl MetricsRecord {
    pub const CSV_COLUMNS: [&'static str; 12] = [
        "step",
        "avg_response_length",
        "log_ppl_abs_diff",
        "grad_norm",
        "grad_norm_smoothed",
        "learning_rate",
        "reward_mean",
        "masked_or_clipped_fraction",
        "entropy",
        "reward_ema",
        "truncated_fraction",
        "surviving_groups",
    ];

    pub fn all_finite(&self) -> bool {
        [
            self.avg_response_length,
            self.log_ppl_abs_diff,
            self.grad_norm,
            self.grad_norm_smoothed,
            self.learning_rate,
            self.reward_mean,
            self.masked_or_clipped_fraction,
            self.entropy,
            self.reward_ema,
            self.truncated_fraction,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// `−Σ_t log p(y_t | x, y_<t)` under the chosen engine.
pub fn log_ppl(traj: &Trajectory, engine: EngineKind) -> Result<f64> {
    let lps = match engine {
        EngineKind::Train => &traj.logprob_train,
        EngineKind::Rollout => &traj.logprob_rollout,
    };
    if lps.len() != traj.tokens.len() {
        return Err(Error::contract(format!(
            "{engine:?} log-probs missing: {} scores for {} tokens",
            lps.len(),
            traj.tokens.len()
        )));
    }
    // -0.0 would print oddly; normalise.
    Ok(-lps.iter().sum::<f64>() + 0.0)
}

/// Batch mean of `|log_ppl(τ, π) − log_ppl(τ, μ)|`.
pub fn mismatch_indicator(batch: &[Trajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("mismatch indicator of an empty batch"));
    }
    let mut total = 0.0;
    for t in batch {
        total += (log_ppl(t, EngineKind::Train)? - log_ppl(t, EngineKind::Rollout)?).abs();
    }
    Ok(total / batch.len() as f64)
}

/// Mean per-token training-engine entropy over a batch.
pub fn mean_token_entropy(batch: &[Trajectory]) -> f64 {
    let tokens: usize = batch.iter().map(Trajectory::len).sum();
    if tokens == 0 {
        return 0.0;
    }
    batch.iter().map(|t| t.entropy_sum).sum::<f64>() / tokens as f64
}

/// Exponential moving average; the first observation initialises it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub smoothing: f64,
    pub value: Option<f64>,
}

impl Ema {
    pub fn new(smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing < 1.0) {
            return Err(Error::config(format!("smoothing must be in (0, 1), got {smoothing}")));
        }
        Ok(Ema { smoothing, value: None })
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.smoothing * prev + (1.0 - self.smoothing) * x,
        };
        self.value = Some(v);
        v
    }
}

/// EMA of a whole history; returns the smoothed series.
pub fn smoothed_grad_norm(history: &[f64], smoothing: f64) -> Result<Vec<f64>> {
    let mut ema = Ema::new(smoothing)?;
    Ok(history.iter().map(|&x| ema.update(x)).collect())
}

/// Response-length surge detector.
///
/// The baseline is the median of the previous `window` average lengths. A
/// surge fires the first time the current length reaches
/// `surge_factor × baseline`; after that the step and baseline are latched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeDetectorState {
    pub window: usize,
    pub surge_factor: f64,
    pub baseline: Option<f64>,
    pub surge_step: Option<u64>,
    history: Vec<f64>,
}

impl SurgeDetectorState {
    pub fn new(window: usize, surge_factor: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("surge window must be positive"));
        }
        if !(surge_factor > 0.0) {
            return Err(Error::config("surge factor must be positive"));
        }
        Ok(SurgeDetectorState { window, surge_factor, baseline: None, surge_step: None, history: Vec::new() })
    }

    pub fn triggered(&self) -> bool {
        self.surge_step.is_some()
    }
}

/// Feeds one step's average length; returns the updated detector.
pub fn detect_surge(mut state: SurgeDetectorState, step: u64, avg_length: f64) -> SurgeDetectorState {
    if state.surge_step.is_some() {
        return state;
    }
    if state.history.len() >= state.window {
        let base = median(&state.history[state.history.len() - state.window..]);
        state.baseline = Some(base);
        if avg_length >= state.surge_factor * base {
            state.surge_step = Some(step);
            state.history.clear();
            return state;
        }
    }
    state.history.push(avg_length);
    if state.history.len() > state.window {
        state.history.remove(0);
    }
    state
}
