//! Stopping rules shared by the alternating solvers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    /// Stop when the relative max-norm change of every parameter block falls below this.
    pub param_rel_tol: f64,
    /// Stop when the relative objective change stays below this for `objective_patience`
    /// consecutive iterations. Zero disables the check.
    pub objective_rel_tol: f64,
    pub objective_patience: usize,
    pub max_iter: usize,
}

impl StopRule {
    /// Relative parameter change below 1e-8, at most 1000 iterations.
    pub fn ias_default() -> Self {
        Self {
            param_rel_tol: 1e-8,
            objective_rel_tol: 0.0,
            objective_patience: 0,
            max_iter: 1000,
        }
    }

    /// Relative ELBO change below 1e-10 for 5 sweeps, or relative parameter
    /// change below 1e-8, at most 1000 sweeps.
    pub fn vias_default() -> Self {
        Self {
            param_rel_tol: 1e-8,
            objective_rel_tol: 1e-10,
            objective_patience: 5,
            max_iter: 1000,
        }
    }

    /// Runs exactly `iterations` iterations.
    pub fn fixed(iterations: usize) -> Self {
        Self {
            param_rel_tol: 0.0,
            objective_rel_tol: 0.0,
            objective_patience: 0,
            max_iter: iterations,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ParameterChange,
    ObjectiveStalled,
    MaxIterations,
}

impl StopReason {
    pub fn converged(self) -> bool {
        !matches!(self, StopReason::MaxIterations)
    }
}

/// `‖new − old‖∞ / ‖new‖∞`, zero when nothing moved.
pub fn relative_change(new: &nalgebra::DVector<f64>, old: &nalgebra::DVector<f64>) -> f64 {
    let diff = (new - old).amax();
    if diff == 0.0 {
        return 0.0;
    }
    diff / new.amax().max(f64::MIN_POSITIVE)
}

/// Tracks consecutive small relative objective changes.
#[derive(Debug, Default)]
pub(crate) struct Stall {
    previous: Option<f64>,
    streak: usize,
}

impl Stall {
    pub(crate) fn update(&mut self, value: f64, rule: &StopRule) -> bool {
        let stalled = match self.previous {
            Some(prev) if rule.objective_rel_tol > 0.0 => {
                (value - prev).abs() <= rule.objective_rel_tol * prev.abs().max(f64::MIN_POSITIVE)
            }
            _ => false,
        };
        self.previous = Some(value);
        self.streak = if stalled { self.streak + 1 } else { 0 };
        rule.objective_patience > 0 && self.streak >= rule.objective_patience
    }
}
