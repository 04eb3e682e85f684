//! Polar power-flow equations and the Newton-Raphson solver.
//!
//! Unknowns are `[E; θ]` over every (node, phase) of the network, slack
//! nodes included: the slack is represented through its Thévenin power, so
//! no angle reference is eliminated. Residuals are `[ΔP; ΔQ]` with
//! `ΔS = S(V) − S_devices(V, λ)`.

use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{DeviceError, DeviceSet};
use crate::grid::{injected_power, GridModel};
use crate::kron::{recover_interior, KronError, ReductionSchedule};
use crate::linalg::{condition_number_2, LinalgError, LuFactors, RealDense};
use crate::network::{Network, NetworkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("Newton-Raphson did not converge after {} iterations (mismatch {:.3e})", .0.iterations, .0.final_mismatch_inf)]
    NotConverged(Box<PowerFlowResult>),
    #[error("power-flow Jacobian is singular: {0}")]
    SingularJacobian(LinalgError),
    #[error("state has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tolerance must be positive")]
    InvalidTolerance,
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Kron(#[from] KronError),
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Voltages in polar form, `V = E∠θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarState {
    pub magnitude: Vec<f64>,
    pub angle: Vec<f64>,
}

impl PolarState {
    pub fn new(magnitude: Vec<f64>, angle: Vec<f64>) -> Self {
        assert_eq!(magnitude.len(), angle.len());
        let mut s = Self { magnitude, angle };
        s.normalize();
        s
    }

    /// Positive-sequence phasors of unit magnitude at every node.
    pub fn flat_start(nodes: usize, phases: usize) -> Self {
        let angle = (0..nodes)
            .flat_map(|_| (0..phases).map(move |p| wrap_angle(-2.0 * PI * p as f64 / phases as f64)))
            .collect::<Vec<_>>();
        Self {
            magnitude: vec![1.0; angle.len()],
            angle,
        }
    }

    pub fn from_voltages(v: &[Complex64]) -> Self {
        Self::new(v.iter().map(|x| x.norm()).collect(), v.iter().map(|x| x.arg()).collect())
    }

    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }

    pub fn voltages(&self) -> Vec<Complex64> {
        self.magnitude
            .iter()
            .zip(&self.angle)
            .map(|(&e, &t)| Complex64::from_polar(e, t))
            .collect()
    }

    /// Stacked `[E; θ]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = self.magnitude.clone();
        x.extend_from_slice(&self.angle);
        x
    }

    pub fn from_vector(x: &[f64]) -> Self {
        let n = x.len() / 2;
        Self::new(x[..n].to_vec(), x[n..].to_vec())
    }

    /// Restores `E > 0` (flipping the phasor by π) and wraps angles.
    pub fn normalize(&mut self) {
        for (e, t) in self.magnitude.iter_mut().zip(self.angle.iter_mut()) {
            if *e < 0.0 {
                *e = -*e;
                *t += PI;
            }
            *t = wrap_angle(*t);
        }
    }
}

fn check_state(net: &Network, state: &PolarState) -> Result<(), PowerFlowError> {
    if state.len() != net.dim() {
        return Err(PowerFlowError::DimensionMismatch {
            expected: net.dim(),
            got: state.len(),
        });
    }
    Ok(())
}

/// Complex mismatch `ΔS = V ∘ conj(Y V) − S_devices(V, λ)`.
pub fn complex_mismatch(net: &Network, v: &[Complex64], lambda: &[f64]) -> Result<Vec<Complex64>, PowerFlowError> {
    let s = injected_power(net.admittance(), v).map_err(NetworkError::from)?;
    let d = net.devices().stack_powers(v, lambda)?;
    Ok(s.iter().zip(&d).map(|(a, b)| a - b).collect())
}

/// Real residual `[ΔP; ΔQ]`.
pub fn mismatch(net: &Network, state: &PolarState, lambda: &[f64]) -> Result<Vec<f64>, PowerFlowError> {
    check_state(net, state)?;
    let ds = complex_mismatch(net, &state.voltages(), lambda)?;
    let mut f: Vec<f64> = ds.iter().map(|s| s.re).collect();
    f.extend(ds.iter().map(|s| s.im));
    Ok(f)
}

/// Analytic Jacobian `∂[ΔP; ΔQ] / ∂[E; θ]`.
///
/// With `I = (Y + Y_TE) V − Y_TE V_TE` the network-plus-Thévenin part of
/// the mismatch is `V ∘ conj(I)`, so
///
/// ```text
/// ∂ΔS_i/∂E_j = V_i conj(Y_ij u_j) + δ_ij (conj(I_i) u_i − ∂S_PM,i/∂E_i)
/// ∂ΔS_i/∂θ_j = −j V_i conj(Y_ij V_j) + δ_ij j V_i conj(I_i)
/// ```
///
/// where `u_j = e^{jθ_j}` and `Y` is the augmented admittance.
pub fn jacobian(net: &Network, state: &PolarState, lambda: &[f64]) -> Result<RealDense, PowerFlowError> {
    check_state(net, state)?;
    net.devices().check_loading(lambda)?;
    let n = net.dim();
    let p = net.phases();
    let y = net.augmented_admittance();
    let v = state.voltages();
    let u: Vec<Complex64> = state.angle.iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
    let mut current = y.matvec(&v).expect("dimension checked");
    for (i, s) in current.iter_mut().zip(net.source_current()) {
        *i -= s;
    }

    let mut j = RealDense::zeros(2 * n, 2 * n);
    let cols = 2 * n;
    let data = j.as_mut_slice();
    for i in 0..n {
        let vi = v[i];
        let yrow = y.row(i);
        let (p_rows, q_rows) = data.split_at_mut(n * cols);
        let p_row = &mut p_rows[i * cols..(i + 1) * cols];
        let q_row = &mut q_rows[i * cols..(i + 1) * cols];
        for k in 0..n {
            let yk = yrow[k];
            if yk.re == 0.0 && yk.im == 0.0 {
                continue;
            }
            let b = vi * (yk * u[k]).conj();
            let a = b * state.magnitude[k];
            p_row[k] = b.re;
            q_row[k] = b.im;
            // −j·a
            p_row[n + k] = a.im;
            q_row[n + k] = -a.re;
        }
        let ci = current[i].conj();
        let de = ci * u[i];
        let dt = Complex64::new(0.0, 1.0) * vi * ci;
        p_row[i] += de.re;
        q_row[i] += de.im;
        p_row[n + i] += dt.re;
        q_row[n + i] += dt.im;
    }
    for ((pos, pm), &l) in net.devices().resource().iter().zip(lambda) {
        let mags = &state.magnitude[pos * p..(pos + 1) * p];
        for (k, d) in pm.power_derivative(mags, l).into_iter().enumerate() {
            let i = pos * p + k;
            j[(i, i)] -= d.re;
            j[(n + i, i)] -= d.im;
        }
    }
    Ok(j)
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrmOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    /// Computes the 2-norm condition number of the Jacobian at the solution.
    pub condition: bool,
}

impl Default for NrmOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 50,
            condition: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowResult {
    pub state: PolarState,
    pub iterations: usize,
    pub final_mismatch_inf: f64,
    pub jacobian_condition: Option<f64>,
    pub converged: bool,
}

impl PowerFlowResult {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.state.voltages()
    }
}

/// Newton-Raphson iteration `x ← x − J⁻¹ f` with full (undamped) steps.
///
/// Stops when `‖f‖∞ ≤ tolerance`. Diverges early when the mismatch stays
/// above ten times its initial value for three consecutive iterations.
pub fn solve_nrm(
    net: &Network,
    lambda: &[f64],
    init: &PolarState,
    opts: &NrmOptions,
) -> Result<PowerFlowResult, PowerFlowError> {
    if !(opts.tolerance > 0.0) {
        return Err(PowerFlowError::InvalidTolerance);
    }
    check_state(net, init)?;
    let mut x = init.clone();
    x.normalize();
    let mut f = mismatch(net, &x, lambda)?;
    let mut norm = norm_inf(&f);
    let initial = norm;
    let mut best = (x.clone(), norm);
    let mut growth = 0;
    let mut iterations = 0;

    while norm > opts.tolerance && iterations < opts.max_iter {
        let jac = jacobian(net, &x, lambda)?;
        let lu = LuFactors::factor_owned(jac).map_err(PowerFlowError::SingularJacobian)?;
        let dx = lu.solve_vec(&f).map_err(PowerFlowError::SingularJacobian)?;
        let nx = x.len();
        for (k, d) in dx.iter().enumerate() {
            if k < nx {
                x.magnitude[k] -= d;
            } else {
                x.angle[k - nx] -= d;
            }
        }
        x.normalize();
        iterations += 1;
        f = mismatch(net, &x, lambda)?;
        norm = norm_inf(&f);
        if !norm.is_finite() {
            break;
        }
        if norm < best.1 {
            best = (x.clone(), norm);
        }
        if norm > 10.0 * initial {
            growth += 1;
            if growth >= 3 {
                break;
            }
        } else {
            growth = 0;
        }
    }

    let converged = norm <= opts.tolerance;
    let (state, final_norm) = if converged { (x, norm) } else { best };
    let jacobian_condition = if opts.condition {
        Some(
            condition_number_2(&jacobian(net, &state, lambda)?)
                .map_err(PowerFlowError::SingularJacobian)?,
        )
    } else {
        None
    };
    let result = PowerFlowResult {
        state,
        iterations,
        final_mismatch_inf: final_norm,
        jacobian_condition,
        converged,
    };
    if converged {
        Ok(result)
    } else {
        Err(PowerFlowError::NotConverged(Box::new(result)))
    }
}

/// Convenience: flat-start solve.
pub fn solve_flat(net: &Network, lambda: &[f64], opts: &NrmOptions) -> Result<PowerFlowResult, PowerFlowError> {
    let init = PolarState::flat_start(net.nodes().len(), net.phases());
    solve_nrm(net, lambda, &init, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConsistency {
    pub step: usize,
    pub iterations: usize,
    /// Max complex modulus deviation on retained nodes vs. the unreduced solution.
    pub retained_deviation: f64,
    /// Max deviation of recovered interior voltages vs. the unreduced solution.
    pub interior_deviation: f64,
    pub elapsed_ns: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub tolerance: f64,
    pub steps: Vec<StepConsistency>,
}

impl ConsistencyReport {
    pub fn all_passed(&self) -> bool {
        self.steps.iter().all(|s| s.passed)
    }

    pub fn max_deviation(&self) -> f64 {
        self.steps
            .iter()
            .fold(0.0, |m, s| m.max(s.retained_deviation).max(s.interior_deviation))
    }
}

/// Solves every step of `schedule` from a flat start and compares retained
/// and recovered interior voltages with the unreduced solution.
pub fn full_vs_reduced_consistency(
    grid: &GridModel,
    devices: &DeviceSet,
    schedule: &ReductionSchedule,
    lambda: &[f64],
    opts: &NrmOptions,
    tolerance: f64,
) -> Result<ConsistencyReport, PowerFlowError> {
    let mut steps = Vec::with_capacity(schedule.steps.len());
    let mut reference: Option<Vec<Complex64>> = None;
    for step in &schedule.steps {
        let net = Network::reduced(grid, devices, step)?;
        let start = Instant::now();
        let sol = solve_flat(&net, lambda, opts)?;
        let elapsed_ns = start.elapsed().as_nanos() as u64;
        let v = sol.voltages();
        let full = match &reference {
            Some(r) => r,
            None => {
                if !step.eliminated.is_empty() {
                    return Err(PowerFlowError::Network(NetworkError::StepMismatch {
                        step: step.retained.len(),
                        grid: grid.dim(),
                    }));
                }
                reference.insert(v.clone())
            }
        };
        let retained_deviation = step
            .retained
            .iter()
            .zip(&v)
            .fold(0.0f64, |m, (i, x)| m.max((full[i] - x).norm()));
        let interior = recover_interior(step, &v)?;
        let interior_deviation = step
            .eliminated
            .iter()
            .zip(&interior)
            .fold(0.0f64, |m, (i, x)| m.max((full[i] - x).norm()));
        steps.push(StepConsistency {
            step: step.step_index,
            iterations: sol.iterations,
            retained_deviation,
            interior_deviation,
            elapsed_ns,
            passed: retained_deviation < tolerance && interior_deviation < tolerance,
        });
    }
    Ok(ConsistencyReport { tolerance, steps })
}
