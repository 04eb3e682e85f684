//! Voltage stability assessment by homotopy continuation.
//!
//! The loading follows `λ(ξ) = λ0 + ξ t`. Starting from the power-flow
//! solution at `ξ = 0`, a tangent predictor and a Newton corrector trace
//! the solution curve `g(x, ξ) = 0` with a local parameterization: the
//! component with the largest tangent entry is held fixed in the corrector,
//! which keeps the augmented Jacobian nonsingular through the nose.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, LuFactors, RealDense};
use crate::network::Network;
use crate::powerflow::{jacobian, mismatch, norm_inf, solve_flat, NrmOptions, PolarState, PowerFlowError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VsaError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid continuation options: {0}")]
    InvalidOptions(String),
    #[error("base power flow failed: {0}")]
    BaseCase(PowerFlowError),
    #[error("augmented Jacobian is singular: {0}")]
    SingularAugmentedJacobian(LinalgError),
    #[error("corrector failed at ξ = {xi:.6} after {halvings} step halvings")]
    CorrectorFailed { xi: f64, halvings: usize },
    #[error("no nose point within {0} continuation steps")]
    StepLimit(usize),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

/// Loading trajectory `λ(ξ) = λ0 + ξ t`, one entry per resource node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    lambda0: Vec<f64>,
    direction: Vec<f64>,
}

impl Trajectory {
    pub fn new(lambda0: Vec<f64>, direction: Vec<f64>) -> Result<Self, VsaError> {
        if lambda0.len() != direction.len() {
            return Err(VsaError::InvalidTrajectory(format!(
                "origin has {} entries, direction {}",
                lambda0.len(),
                direction.len()
            )));
        }
        if lambda0.iter().chain(&direction).any(|v| !v.is_finite()) {
            return Err(VsaError::InvalidTrajectory("non-finite entry".into()));
        }
        if direction.iter().all(|&t| t == 0.0) {
            return Err(VsaError::InvalidTrajectory("direction is zero".into()));
        }
        Ok(Self { lambda0, direction })
    }

    pub fn origin(&self) -> &[f64] {
        &self.lambda0
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn at(&self, xi: f64) -> Vec<f64> {
        self.lambda0.iter().zip(&self.direction).map(|(l, t)| l + xi * t).collect()
    }
}

/// `g(x, ξ)`: the power-flow mismatch at `λ(ξ)`.
pub fn augmented_mismatch(net: &Network, x: &PolarState, xi: f64, traj: &Trajectory) -> Result<Vec<f64>, VsaError> {
    Ok(mismatch(net, x, &traj.at(xi))?)
}

/// `∂g/∂ξ`. Device powers are linear in λ, so this is minus the
/// polynomial powers evaluated with loading `t`.
pub fn loading_derivative(net: &Network, x: &PolarState, traj: &Trajectory) -> Result<Vec<f64>, VsaError> {
    let v = x.voltages();
    let devices = net.devices();
    let with_t = devices.stack_powers(&v, traj.direction()).map_err(PowerFlowError::from)?;
    let zero = vec![0.0; traj.direction().len()];
    let without = devices.stack_powers(&v, &zero).map_err(PowerFlowError::from)?;
    let d: Vec<Complex64> = with_t.iter().zip(&without).map(|(a, b)| b - a).collect();
    Ok(d.iter().map(|s| s.re).chain(d.iter().map(|s| s.im)).collect())
}

/// `[D_x g, D_ξ g; e_kᵀ]`.
pub fn augmented_jacobian(
    net: &Network,
    x: &PolarState,
    xi: f64,
    traj: &Trajectory,
    k: usize,
) -> Result<RealDense, VsaError> {
    let j = jacobian(net, x, &traj.at(xi))?;
    let g_xi = loading_derivative(net, x, traj)?;
    let m = j.rows();
    let mut a = RealDense::zeros(m + 1, m + 1);
    for r in 0..m {
        a.row_mut(r)[..m].copy_from_slice(j.row(r));
        a[(r, m)] = g_xi[r];
    }
    a[(m, k)] = 1.0;
    Ok(a)
}

fn stacked(x: &PolarState, xi: f64) -> Vec<f64> {
    let mut z = x.to_vector();
    z.push(xi);
    z
}

/// Splits `[E; θ; ξ]` without wrapping angles, so the trace stays continuous.
fn unstack(z: &[f64]) -> (PolarState, f64) {
    let n = (z.len() - 1) / 2;
    (
        PolarState {
            magnitude: z[..n].to_vec(),
            angle: z[n..2 * n].to_vec(),
        },
        z[2 * n],
    )
}

fn argmax_abs(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, -1.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationState {
    pub x: PolarState,
    pub xi: f64,
    /// Tangent over `[E; θ; ξ]` with unit max-magnitude component.
    pub tangent: Vec<f64>,
    pub continuation_index: usize,
}

impl ContinuationState {
    pub fn xi_index(&self) -> usize {
        self.tangent.len() - 1
    }
}

/// Solves `[D_x g, D_ξ g; e_kᵀ] τ = [0; 1]`, scales `τ` to unit
/// max-magnitude component and orients it along `previous`.
pub fn tangent(
    net: &Network,
    x: &PolarState,
    xi: f64,
    traj: &Trajectory,
    k: usize,
    previous: &[f64],
) -> Result<Vec<f64>, VsaError> {
    let a = augmented_jacobian(net, x, xi, traj, k)?;
    let m = a.rows();
    let lu = LuFactors::factor_owned(a).map_err(VsaError::SingularAugmentedJacobian)?;
    let mut rhs = vec![0.0; m];
    rhs[m - 1] = 1.0;
    let mut tau = lu.solve_vec(&rhs).map_err(VsaError::SingularAugmentedJacobian)?;
    let scale = tau[argmax_abs(&tau)].abs();
    let dot: f64 = tau.iter().zip(previous).map(|(a, b)| a * b).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    for t in &mut tau {
        *t *= sign / scale;
    }
    Ok(tau)
}

/// Length measure used to turn the tangent into a predictor step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepNorm {
    /// Step `σ τ` with `‖τ‖∞ = 1`: the largest component moves by `σ`.
    MaxComponent,
    /// Step `σ τ / ‖τ‖₂`: the whole state moves by `σ` in Euclidean length.
    #[default]
    Euclidean,
}

/// `(x, ξ) + σ·step(τ)`.
pub fn tangent_predictor(state: &ContinuationState, sigma: f64, norm: StepNorm) -> (PolarState, f64) {
    let scale = match norm {
        StepNorm::MaxComponent => sigma,
        StepNorm::Euclidean => sigma / state.tangent.iter().map(|t| t * t).sum::<f64>().sqrt(),
    };
    let z: Vec<f64> = stacked(&state.x, state.xi)
        .iter()
        .zip(&state.tangent)
        .map(|(z, t)| z + scale * t)
        .collect();
    unstack(&z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationOptions {
    pub sigma: f64,
    pub tolerance: f64,
    pub corrector_max_iter: usize,
    pub max_halvings: usize,
    /// Consecutive accepted steps before a halved σ is doubled again.
    pub restore_after: usize,
    pub max_steps: usize,
    pub step_norm: StepNorm,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            tolerance: 1e-8,
            corrector_max_iter: 10,
            max_halvings: 6,
            restore_after: 2,
            max_steps: 10_000,
            step_norm: StepNorm::default(),
        }
    }
}

impl ContinuationOptions {
    fn validate(&self) -> Result<(), VsaError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(VsaError::InvalidOptions(format!("sigma = {}", self.sigma)));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(VsaError::InvalidOptions(format!("tolerance = {}", self.tolerance)));
        }
        if self.corrector_max_iter == 0 || self.max_steps == 0 {
            return Err(VsaError::InvalidOptions("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corrected {
    pub x: PolarState,
    pub xi: f64,
    pub iterations: usize,
    pub mismatch_inf: f64,
}

/// Newton iterations on `[g(x, ξ); z_k − target] = 0` from the guess,
/// where `target` is the guess's own component `k`.
pub fn corrector(
    net: &Network,
    guess: (&PolarState, f64),
    traj: &Trajectory,
    k: usize,
    tolerance: f64,
    max_iter: usize,
) -> Result<Corrected, VsaError> {
    let mut z = stacked(guess.0, guess.1);
    let target = z[k];
    let failed = |xi| VsaError::CorrectorFailed { xi, halvings: 0 };
    for iterations in 0..=max_iter {
        let (x, xi) = unstack(&z);
        let g = augmented_mismatch(net, &x, xi, traj)?;
        let norm = norm_inf(&g);
        if !norm.is_finite() {
            return Err(failed(guess.1));
        }
        if norm <= tolerance && (z[k] - target).abs() <= tolerance {
            return Ok(Corrected {
                x,
                xi,
                iterations,
                mismatch_inf: norm,
            });
        }
        if iterations == max_iter {
            break;
        }
        let a = augmented_jacobian(net, &x, xi, traj, k)?;
        let lu = LuFactors::factor_owned(a).map_err(|_| failed(guess.1))?;
        let mut f = g;
        f.push(z[k] - target);
        let dz = lu.solve_vec(&f).map_err(|_| failed(guess.1))?;
        for (zi, d) in z.iter_mut().zip(&dz) {
            *zi -= d;
        }
    }
    Err(failed(guess.1))
}

/// Halve on failure, double back toward the base value after a run of
/// successes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    base: f64,
    current: f64,
    successes: usize,
    halvings: usize,
    restore_after: usize,
    max_halvings: usize,
}

impl StepControl {
    pub fn new(base: f64, restore_after: usize, max_halvings: usize) -> Self {
        Self {
            base,
            current: base,
            successes: 0,
            halvings: 0,
            restore_after,
            max_halvings,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.current
    }

    /// Returns `false` when the halving budget for this step is exhausted.
    pub fn failure(&mut self) -> bool {
        self.successes = 0;
        if self.halvings >= self.max_halvings {
            return false;
        }
        self.halvings += 1;
        self.current /= 2.0;
        true
    }

    pub fn success(&mut self) {
        self.halvings = 0;
        self.successes += 1;
        if self.current < self.base && self.successes >= self.restore_after {
            self.current = (2.0 * self.current).min(self.base);
            self.successes = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub xi: f64,
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    pub sigma: f64,
    pub continuation_index: usize,
    pub corrector_iterations: usize,
    pub mismatch_inf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsaResult {
    pub lambda_max: f64,
    pub nose_state: PolarState,
    /// Accepted predictor-corrector steps.
    pub steps: usize,
    pub trace: Vec<TracePoint>,
    /// Accepted states, including the base case, when requested.
    pub states: Option<Vec<PolarState>>,
}

fn trace_point(x: &PolarState, xi: f64, sigma: f64, k: usize, iterations: usize, mismatch: f64) -> TracePoint {
    let (lo, hi) = x
        .magnitude
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    TracePoint {
        xi,
        min_magnitude: lo,
        max_magnitude: hi,
        sigma,
        continuation_index: k,
        corrector_iterations: iterations,
        mismatch_inf: mismatch,
    }
}

/// Tangent at a corrected point; if fixing component `k` is singular there,
/// retries with the loading parameter and then with the largest component
/// of the previous tangent.
fn robust_tangent(
    net: &Network,
    x: &PolarState,
    xi: f64,
    traj: &Trajectory,
    k: usize,
    previous: &[f64],
) -> Result<Vec<f64>, VsaError> {
    let xi_index = previous.len() - 1;
    let mut last = None;
    for candidate in [k, xi_index, argmax_abs(&previous[..xi_index])] {
        match tangent(net, x, xi, traj, candidate, previous) {
            Ok(t) => return Ok(t),
            Err(e @ VsaError::SingularAugmentedJacobian(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one candidate"))
}

/// Traces the curve from the base case at `ξ = 0` until the ξ-component
/// of the tangent changes sign (the nose has been passed).
pub fn run_continuation(
    net: &Network,
    traj: &Trajectory,
    opts: &ContinuationOptions,
    keep_states: bool,
) -> Result<VsaResult, VsaError> {
    opts.validate()?;
    let nrm = NrmOptions {
        tolerance: opts.tolerance,
        ..NrmOptions::default()
    };
    let base = solve_flat(net, &traj.at(0.0), &nrm).map_err(VsaError::BaseCase)?;
    run_continuation_from(net, traj, base.state, opts, keep_states)
}

/// As [`run_continuation`], from a converged state at `ξ = 0`.
pub fn run_continuation_from(
    net: &Network,
    traj: &Trajectory,
    start: PolarState,
    opts: &ContinuationOptions,
    keep_states: bool,
) -> Result<VsaResult, VsaError> {
    opts.validate()?;
    let dim = 2 * start.len() + 1;
    let xi_index = dim - 1;
    let mut seed = vec![0.0; dim];
    seed[xi_index] = 1.0;
    let tau = tangent(net, &start, 0.0, traj, xi_index, &seed)?;
    let first_mismatch = norm_inf(&augmented_mismatch(net, &start, 0.0, traj)?);
    let mut state = ContinuationState {
        continuation_index: argmax_abs(&tau),
        x: start,
        xi: 0.0,
        tangent: tau,
    };
    let mut trace = vec![trace_point(&state.x, 0.0, 0.0, xi_index, 0, first_mismatch)];
    let mut states = keep_states.then(|| vec![state.x.clone()]);
    let mut lambda_max = 0.0;
    let mut nose_state = state.x.clone();
    let mut control = StepControl::new(opts.sigma, opts.restore_after, opts.max_halvings);

    for steps in 1..=opts.max_steps {
        let corrected = loop {
            let sigma = control.sigma();
            let guess = tangent_predictor(&state, sigma, opts.step_norm);
            match corrector(
                net,
                (&guess.0, guess.1),
                traj,
                state.continuation_index,
                opts.tolerance,
                opts.corrector_max_iter,
            ) {
                Ok(c) => break c,
                Err(VsaError::CorrectorFailed { .. }) | Err(VsaError::PowerFlow(_)) => {
                    if !control.failure() {
                        return Err(VsaError::CorrectorFailed {
                            xi: state.xi,
                            halvings: opts.max_halvings,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let sigma = control.sigma();
        control.success();
        let tau = robust_tangent(
            net,
            &corrected.x,
            corrected.xi,
            traj,
            state.continuation_index,
            &state.tangent,
        )?;
        let before = state.tangent[xi_index];
        if corrected.xi > lambda_max {
            lambda_max = corrected.xi;
            nose_state = corrected.x.clone();
        }
        trace.push(trace_point(
            &corrected.x,
            corrected.xi,
            sigma,
            state.continuation_index,
            corrected.iterations,
            corrected.mismatch_inf,
        ));
        if let Some(s) = states.as_mut() {
            s.push(corrected.x.clone());
        }
        state = ContinuationState {
            continuation_index: argmax_abs(&tau),
            x: corrected.x,
            xi: corrected.xi,
            tangent: tau,
        };
        if before > 0.0 && state.tangent[xi_index] <= 0.0 {
            return Ok(VsaResult {
                lambda_max,
                nose_state,
                steps,
                trace,
                states,
            });
        }
    }
    Err(VsaError::StepLimit(opts.max_steps))
}
