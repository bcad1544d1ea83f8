//! Shared successive-convex-approximation loop and stage errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{SolveStatus, SolverSettings};
use crate::design::ConstraintClass;

#[derive(Clone, Debug)]
pub struct ScaOptions {
    pub max_iter: usize,
    /// Stop when the relative decrease of the true objective drops below this.
    pub rel_tol: f64,
    pub solver: SolverSettings,
}

impl Default for ScaOptions {
    fn default() -> Self {
        Self { max_iter: 50, rel_tol: 1e-5, solver: SolverSettings::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaStatus {
    Converged,
    MaxIter,
    /// A later subproblem failed; the last good iterate was kept.
    SubproblemFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaTrace {
    /// True relaxed objective at the starting point and after every iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub status: ScaStatus,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("instance infeasible (binding class: {0:?})")]
    Infeasible(Option<ConstraintClass>),
    #[error("solver failure: {0:?}")]
    Solver(SolveStatus),
    #[error("degenerate rank-one recovery for IR {0}")]
    DegenerateRecovery(usize),
    #[error("no feasible randomization candidate (least worst relative violation {best_violation:e})")]
    RandomizationFailure { best_violation: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Iterate `step` from `init` until the objective stalls.
///
/// An iterate whose objective rises above the previous one by more than
/// `1e-9` relative is rejected and the loop stops, so the returned trace is
/// non-increasing.
pub fn run_sca<T>(
    init: T,
    opts: &ScaOptions,
    mut step: impl FnMut(&T) -> Result<T, StageError>,
    objective: impl Fn(&T) -> f64,
) -> (T, ScaTrace) {
    let mut current = init;
    let mut prev = objective(&current);
    let mut objectives = vec![prev];
    let mut status = ScaStatus::MaxIter;
    let mut iterations = 0;
    for j in 0..opts.max_iter {
        iterations = j + 1;
        let next = match step(&current) {
            Ok(n) => n,
            Err(e) => {
                log::warn!("SCA subproblem failed at iteration {iterations}: {e}");
                status = ScaStatus::SubproblemFailed;
                break;
            }
        };
        let obj = objective(&next);
        if obj > prev + 1e-9 * prev.abs().max(1e-12) {
            log::debug!("SCA step rejected: {obj:e} > {prev:e}");
            status = ScaStatus::Converged;
            break;
        }
        objectives.push(obj);
        current = next;
        let decrease = prev - obj;
        prev = obj;
        if decrease <= opts.rel_tol * obj.abs() {
            status = ScaStatus::Converged;
            break;
        }
    }
    (current, ScaTrace { objectives, iterations, status })
}
