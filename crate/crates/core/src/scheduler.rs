//! Length-triggered halving learning-rate schedule.
//!
//! Starting from `eta_0`, the rate halves at every step `t` with
//! `t mod T_decay == 0`, never going below `eta_inf`. In adaptive mode
//! `T_decay` is unknown at start; it is set from the detected response-length
//! surge as `round(heuristic_factor × surge_step)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HEURISTIC_FACTOR: f64 = 1.8;
pub const DEFAULT_FLOOR_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    /// Never decays.
    Constant,
    /// `T_decay` fixed at construction.
    Static,
    /// `T_decay` set once from the surge step.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub mode: SchedulerMode,
    pub eta_0: f64,
    pub eta_inf: f64,
    pub t_decay: Option<u64>,
    pub heuristic_factor: f64,
    pub eta_t: f64,
    /// Last step passed to [`SchedulerState::advance`].
    pub step: u64,
}

fn check_rates(eta_0: f64, eta_inf: f64) -> Result<()> {
    if !(eta_0 > 0.0 && eta_0.is_finite()) {
        return Err(Error::config(format!("eta_0 must be positive, got {eta_0}")));
    }
    if !(eta_inf > 0.0 && eta_inf <= eta_0) {
        return Err(Error::config(format!("eta_inf must lie in (0, eta_0], got {eta_inf}")));
    }
    Ok(())
}

/// Round half up to the nearest integer step.
fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

impl SchedulerState {
    pub fn constant(eta: f64) -> Result<Self> {
        check_rates(eta, eta)?;
        Ok(SchedulerState {
            mode: SchedulerMode::Constant,
            eta_0: eta,
            eta_inf: eta,
            t_decay: None,
            heuristic_factor: DEFAULT_HEURISTIC_FACTOR,
            eta_t: eta,
            step: 0,
        })
    }

    pub fn fixed(eta_0: f64, eta_inf: f64, t_decay: u64) -> Result<Self> {
        check_rates(eta_0, eta_inf)?;
        if t_decay == 0 {
            return Err(Error::config("T_decay must be positive"));
        }
        Ok(SchedulerState {
            mode: SchedulerMode::Static,
            eta_0,
            eta_inf,
            t_decay: Some(t_decay),
            heuristic_factor: DEFAULT_HEURISTIC_FACTOR,
            eta_t: eta_0,
            step: 0,
        })
    }

    pub fn adaptive(eta_0: f64, eta_inf: f64, heuristic_factor: f64) -> Result<Self> {
        check_rates(eta_0, eta_inf)?;
        if !(heuristic_factor > 0.0 && heuristic_factor.is_finite()) {
            return Err(Error::config(format!("heuristic_factor must be positive, got {heuristic_factor}")));
        }
        Ok(SchedulerState {
            mode: SchedulerMode::Adaptive,
            eta_0,
            eta_inf,
            t_decay: None,
            heuristic_factor,
            eta_t: eta_0,
            step: 0,
        })
    }

    /// Moves to step `t` (which must be the next step) and returns `eta_t`.
    pub fn advance(&mut self, t: u64) -> Result<f64> {
        if t != self.step + 1 {
            return Err(Error::contract(format!("scheduler stepped from {} to {t}", self.step)));
        }
        self.step = t;
        if let Some(period) = self.t_decay {
            if t.is_multiple_of(period) {
                self.eta_t = (self.eta_t / 2.0).max(self.eta_inf);
            }
        }
        Ok(self.eta_t)
    }

    /// Closed form `max(eta_0 · 2^(−⌊t/T_decay⌋), eta_inf)`; `eta_0` while
    /// `T_decay` is unset.
    pub fn lr_at_step(&self, t: u64) -> f64 {
        match self.t_decay {
            None => self.eta_0,
            Some(period) => {
                let halvings = (t / period).min(2000) as i32;
                (self.eta_0 * 2f64.powi(-halvings)).max(self.eta_inf)
            }
        }
    }

    pub fn armed(&self) -> bool {
        self.t_decay.is_some()
    }

    /// Sets `T_decay` from a surge step. Halvings that `T_decay` would already
    /// have produced by the current step are applied immediately.
    pub fn arm_from_surge(&mut self, surge_step: u64) -> Result<u64> {
        if self.mode != SchedulerMode::Adaptive {
            return Err(Error::contract("only an adaptive scheduler can be armed"));
        }
        if self.armed() {
            return Err(Error::contract("scheduler already armed"));
        }
        let period = round_half_up(self.heuristic_factor * surge_step as f64);
        if period == 0 {
            return Err(Error::config(format!(
                "surge step {surge_step} × factor {} rounds to a zero decay period",
                self.heuristic_factor
            )));
        }
        self.t_decay = Some(period);
        for _ in 0..self.step / period {
            self.eta_t = (self.eta_t / 2.0).max(self.eta_inf);
        }
        Ok(period)
    }
}

/// Serialisable scheduler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub eta_0: f64,
    /// `eta_inf = floor_ratio × eta_0`.
    #[serde(default = "default_floor_ratio")]
    pub floor_ratio: f64,
    /// Required in static mode.
    #[serde(default)]
    pub t_decay: Option<u64>,
    #[serde(default = "default_factor")]
    pub heuristic_factor: f64,
}

fn default_floor_ratio() -> f64 {
    DEFAULT_FLOOR_RATIO
}

fn default_factor() -> f64 {
    DEFAULT_HEURISTIC_FACTOR
}

impl SchedulerConfig {
    pub fn build(&self) -> Result<SchedulerState> {
        let eta_inf = self.eta_0 * self.floor_ratio;
        match self.mode {
            SchedulerMode::Constant => SchedulerState::constant(self.eta_0),
            SchedulerMode::Static => {
                let t = self.t_decay.ok_or_else(|| Error::config("static scheduler needs t_decay"))?;
                SchedulerState::fixed(self.eta_0, eta_inf, t)
            }
            SchedulerMode::Adaptive => SchedulerState::adaptive(self.eta_0, eta_inf, self.heuristic_factor),
        }
    }
}
