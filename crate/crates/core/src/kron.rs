//! Kron reduction of zero-injection nodes.
//!
//! With `I_Z = 0`, the interior voltages are a linear function of the
//! retained ones, `V_Z = −Y_ZZ⁻¹ Y_ZR V_R`, and the retained currents obey
//! `I_R = (Y / Y_ZZ) V_R` where `Y / Y_ZZ` is the Schur complement.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{build_admittance, validate_hypotheses, GridError, GridModel, NodeRole};
use crate::linalg::{schur_parts, ComplexDense, IndexSet, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KronError {
    #[error("interior admittance block is singular: {0}")]
    SingularInteriorBlock(LinalgError),
    #[error("Kron reduction precondition violated: {0}")]
    PreconditionViolated(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("reduction batch size must be positive")]
    ZeroBatch,
    #[error("vector length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionStep {
    pub step_index: usize,
    /// Retained flat (node, phase) indices of the original model.
    pub retained: IndexSet,
    /// Eliminated flat indices of the original model.
    pub eliminated: IndexSet,
    pub y_reduced: ComplexDense,
    /// Maps retained voltages to eliminated voltages, `−Y_ZZ⁻¹ Y_ZR`.
    pub recovery: ComplexDense,
}

impl ReductionStep {
    pub fn dim(&self) -> usize {
        self.retained.len()
    }
}

/// Eliminates `eliminate` from `y` by the Schur complement.
pub fn kron_reduce(y: &ComplexDense, eliminate: &IndexSet) -> Result<ReductionStep, KronError> {
    if !y.is_square() {
        return Err(LinalgError::NotSquare {
            rows: y.rows(),
            cols: y.cols(),
        }
        .into());
    }
    if eliminate.len() >= y.rows() && y.rows() > 0 {
        return Err(KronError::PreconditionViolated(
            "at least one node must be retained".into(),
        ));
    }
    let retained = eliminate.complement(y.rows());
    if retained.len() + eliminate.len() != y.rows() {
        return Err(LinalgError::InvalidIndexSet("eliminated index out of range".into()).into());
    }
    let parts = schur_parts(y, &retained, eliminate).map_err(|e| match e {
        LinalgError::SingularBlock(inner) => KronError::SingularInteriorBlock(*inner),
        other => KronError::Linalg(other),
    })?;
    let recovery = parts.interior_solve.scale(Complex64::new(-1.0, 0.0));
    Ok(ReductionStep {
        step_index: 0,
        retained,
        eliminated: eliminate.clone(),
        y_reduced: parts.complement,
        recovery,
    })
}

/// `V_Z = recovery · V_retained`.
pub fn recover_interior(step: &ReductionStep, v_retained: &[Complex64]) -> Result<Vec<Complex64>, KronError> {
    if v_retained.len() != step.retained.len() {
        return Err(KronError::DimensionMismatch {
            expected: step.retained.len(),
            got: v_retained.len(),
        });
    }
    Ok(step.recovery.matvec(v_retained)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSchedule {
    pub batch: usize,
    pub steps: Vec<ReductionStep>,
    /// Set when the batch does not divide the zero-injection count; the
    /// final step then eliminates a smaller remainder.
    pub uneven_final_batch: bool,
}

/// Step `k` eliminates the last `k·batch` zero-injection nodes (in canonical
/// order); step 0 is the unreduced model and the final step eliminates all
/// of them. Preconditions are checked once for the whole schedule.
pub fn reduction_schedule(grid: &GridModel, batch: usize) -> Result<ReductionSchedule, KronError> {
    if batch == 0 {
        return Err(KronError::ZeroBatch);
    }
    let zero: Vec<usize> = grid
        .nodes_with_role(NodeRole::ZeroInjection)
        .map(|(pos, _)| pos)
        .collect();
    if !zero.is_empty() {
        let report = validate_hypotheses(grid);
        if !report.kron_eligible {
            let reasons: Vec<String> = report
                .failures()
                .map(|c| format!("{}: {}", c.name, c.detail))
                .collect();
            return Err(KronError::PreconditionViolated(reasons.join("; ")));
        }
    }
    let y = build_admittance(grid)?;
    let p = grid.phases();
    let count = zero.len().div_ceil(batch);
    let mut steps = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let n_elim = (k * batch).min(zero.len());
        let mut nodes = zero[zero.len() - n_elim..].to_vec();
        nodes.sort_unstable();
        let flat: Vec<usize> = nodes.iter().flat_map(|&n| (0..p).map(move |ph| n * p + ph)).collect();
        let eliminate = IndexSet::new(flat, y.rows())?;
        let mut step = kron_reduce(&y, &eliminate)?;
        step.step_index = k;
        steps.push(step);
    }
    Ok(ReductionSchedule {
        batch,
        steps,
        uneven_final_batch: zero.len() % batch != 0,
    })
}
