//! Cosine learning-rate decay with warm restarts and a dynamic start point.
//!
//! Within a cycle the rate follows
//! `lr_min + (start_lr - lr_min) * (1 + cos(pi * t)) / 2` for `t` in `[0, 1]`.
//! At each restart the start rate is either reset to `lr_max` ([`DynamicMode::Fixed`])
//! or shrunk geometrically by `restart_decay` ([`DynamicMode::Geometric`]).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error("cycle {next} exceeds the configured {cycles} cycles")]
    CycleOverflow { next: usize, cycles: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicMode {
    Fixed,
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycles: usize,
    pub epochs_per_cycle: usize,
    pub restart_decay: f64,
    pub dynamic_mode: DynamicMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.1,
            lr_min: 0.001,
            cycles: 5,
            epochs_per_cycle: 100,
            restart_decay: 0.7,
            dynamic_mode: DynamicMode::Geometric,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |msg: String| Err(ScheduleError::InvalidConfig(msg));
        if !(self.lr_min.is_finite() && self.lr_max.is_finite()) || self.lr_min < 0.0 {
            return bad(format!("learning rates must be finite and non-negative ({}, {})", self.lr_min, self.lr_max));
        }
        if self.lr_min >= self.lr_max {
            return bad(format!("lr_min {} must be below lr_max {}", self.lr_min, self.lr_max));
        }
        if self.cycles == 0 || self.epochs_per_cycle == 0 {
            return bad("cycles and epochs_per_cycle must be at least 1".into());
        }
        if !(self.restart_decay > 0.0 && self.restart_decay <= 1.0) {
            return bad(format!("restart_decay {} must lie in (0, 1]", self.restart_decay));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.cycles * self.epochs_per_cycle
    }
}

/// Position within the schedule. `cycle` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub cycle: usize,
    pub start_lr: f64,
    pub epoch_in_cycle: usize,
}

impl ScheduleState {
    pub fn initial(cfg: &ScheduleConfig) -> Self {
        Self {
            cycle: 0,
            start_lr: cfg.lr_max,
            epoch_in_cycle: 0,
        }
    }
}

/// Learning rate at fraction `t` of the current cycle.
pub fn lr_at(cfg: &ScheduleConfig, state: &ScheduleState, t: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&t), "cycle fraction {t} outside [0, 1]");
    let t = t.clamp(0.0, 1.0);
    cfg.lr_min + (state.start_lr - cfg.lr_min) * (1.0 + (PI * t).cos()) / 2.0
}

/// Moves to the next cycle, choosing its start rate per `dynamic_mode`.
pub fn advance_cycle(cfg: &ScheduleConfig, state: &ScheduleState) -> Result<ScheduleState, ScheduleError> {
    let next = state.cycle + 1;
    if next >= cfg.cycles {
        return Err(ScheduleError::CycleOverflow {
            next,
            cycles: cfg.cycles,
        });
    }
    let start_lr = match cfg.dynamic_mode {
        DynamicMode::Fixed => cfg.lr_max,
        DynamicMode::Geometric => (cfg.restart_decay * state.start_lr).max(cfg.lr_min),
    };
    Ok(ScheduleState {
        cycle: next,
        start_lr,
        epoch_in_cycle: 0,
    })
}
