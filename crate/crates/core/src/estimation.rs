//! Linear state estimation from PMU and virtual measurements.
//!
//! State `x = [Re V; Im V]` over every node of the (possibly reduced)
//! network. Measurements are voltages at slack and resource nodes and
//! injected currents `I = Y V` at every node; currents of the remaining
//! zero-injection nodes are virtual zeros with a much smaller variance.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{NodeRole, PerUnitBase};
use crate::linalg::{condition_number_2, LinalgError, LuFactors, RealDense};
use crate::network::Network;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("invalid PMU specification: {0}")]
    InvalidPmu(String),
    #[error("measurement model is not observable: {0}")]
    RankDeficient(LinalgError),
    #[error("gain matrix is singular: {0}")]
    SingularGain(LinalgError),
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance entries must be positive and finite")]
    InvalidCovariance,
    #[error("Monte Carlo needs at least one draw")]
    NoDraws,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmuSpec {
    /// RMS volts.
    pub fsr_voltage: f64,
    /// RMS amperes.
    pub fsr_current: f64,
    /// Magnitude standard deviation, per unit of the FSR.
    pub sigma_magnitude: f64,
    /// Angle standard deviation in radians.
    pub sigma_angle: f64,
    /// Divisor applied to the current σ for virtual measurements.
    pub virtual_scale: f64,
}

impl Default for PmuSpec {
    fn default() -> Self {
        Self {
            fsr_voltage: 20e3,
            fsr_current: 100.0,
            sigma_magnitude: 1e-3,
            sigma_angle: 1.5e-3,
            virtual_scale: 100.0,
        }
    }
}

impl PmuSpec {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let fields = [
            ("fsr_voltage", self.fsr_voltage),
            ("fsr_current", self.fsr_current),
            ("sigma_magnitude", self.sigma_magnitude),
            ("sigma_angle", self.sigma_angle),
            ("virtual_scale", self.virtual_scale),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(EstimationError::InvalidPmu(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Voltage magnitude σ in per unit of the phase base voltage.
    pub fn voltage_sigma_pu(&self, base: &PerUnitBase) -> f64 {
        self.sigma_magnitude * self.fsr_voltage / base.phase_voltage_v()
    }

    /// Current magnitude σ in per unit of the base current.
    pub fn current_sigma_pu(&self, base: &PerUnitBase) -> f64 {
        self.sigma_magnitude * self.fsr_current / base.current_a()
    }

    pub fn virtual_sigma_pu(&self, base: &PerUnitBase) -> f64 {
        self.current_sigma_pu(base) / self.virtual_scale
    }
}

/// How polar noise is mapped to the diagonal rectangular covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceRule {
    /// `max(σ_mag², (|m| σ_angle)²)` on both the real and imaginary row.
    MaxOfPolarTerms,
}

/// Complex measurement channel, voltages first then currents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channel {
    Voltage,
    Current,
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    c: RealDense,
    r: Vec<f64>,
    y: Vec<f64>,
    channels: Vec<Channel>,
    base: PerUnitBase,
    voltage_channels: usize,
    virtual_channels: usize,
    covariance_rule: Option<CovarianceRule>,
}

fn check_len(expected: usize, got: usize) -> Result<(), EstimationError> {
    if expected != got {
        return Err(EstimationError::DimensionMismatch { expected, got });
    }
    Ok(())
}

impl MeasurementModel {
    /// Generic model `y = C x + v` with diagonal covariance `r`.
    pub fn from_parts(c: RealDense, r: Vec<f64>, y: Vec<f64>) -> Result<Self, EstimationError> {
        check_len(c.rows(), r.len())?;
        check_len(c.rows(), y.len())?;
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EstimationError::InvalidCovariance);
        }
        let m = Self {
            c,
            r,
            y,
            channels: Vec::new(),
            base: PerUnitBase::default(),
            voltage_channels: 0,
            virtual_channels: 0,
            covariance_rule: None,
        };
        m.gain_factors().map_err(|e| match e {
            EstimationError::SingularGain(e) => EstimationError::RankDeficient(e),
            other => other,
        })?;
        Ok(m)
    }

    pub fn c(&self) -> &RealDense {
        &self.c
    }

    pub fn covariance_diagonal(&self) -> &[f64] {
        &self.r
    }

    pub fn measurements(&self) -> &[f64] {
        &self.y
    }

    pub fn with_measurements(mut self, y: Vec<f64>) -> Result<Self, EstimationError> {
        check_len(self.c.rows(), y.len())?;
        self.y = y;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.c.cols()
    }

    pub fn voltage_channels(&self) -> usize {
        self.voltage_channels
    }

    pub fn virtual_channels(&self) -> usize {
        self.virtual_channels
    }

    pub fn covariance_rule(&self) -> Option<CovarianceRule> {
        self.covariance_rule
    }

    /// Gain matrix `Cᵀ R⁻¹ C`, accumulated row by row over nonzeros.
    pub fn gain(&self) -> RealDense {
        let n = self.c.cols();
        let mut g = RealDense::zeros(n, n);
        let mut nz: Vec<(usize, f64)> = Vec::with_capacity(n);
        let data = g.as_mut_slice();
        for (row, &r) in self.r.iter().enumerate() {
            nz.clear();
            nz.extend(self.c.row(row).iter().copied().enumerate().filter(|(_, v)| *v != 0.0));
            let w = 1.0 / r;
            for &(a, va) in &nz {
                let wa = w * va;
                let g_row = &mut data[a * n..(a + 1) * n];
                for &(b, vb) in &nz {
                    g_row[b] += wa * vb;
                }
            }
        }
        g
    }

    /// `Cᵀ R⁻¹ y`.
    pub fn weighted_rhs(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c.cols()];
        for (row, (&r, &m)) in self.r.iter().zip(y).enumerate() {
            let w = m / r;
            if w == 0.0 {
                continue;
            }
            for (o, &cv) in out.iter_mut().zip(self.c.row(row)) {
                if cv != 0.0 {
                    *o += cv * w;
                }
            }
        }
        out
    }

    fn gain_factors(&self) -> Result<LuFactors<f64>, EstimationError> {
        LuFactors::factor_owned(self.gain()).map_err(EstimationError::SingularGain)
    }

    /// `Cᵀ R⁻¹ (y − C x)`.
    pub fn weighted_residual(&self, x: &[f64]) -> Result<Vec<f64>, EstimationError> {
        check_len(self.state_dim(), x.len())?;
        let fit = self.c.matvec(x).expect("dimension checked");
        let res: Vec<f64> = self.y.iter().zip(&fit).map(|(a, b)| a - b).collect();
        Ok(self.weighted_rhs(&res))
    }
}

/// Builds `C = [Γ 0; 0 Γ; G −B; B G]` for `net`, with the covariance
/// evaluated at `operating_point` (complex voltages of `net`) and noiseless
/// measurements `y = C x(operating_point)`.
pub fn build_measurement_model(
    net: &Network,
    base: &PerUnitBase,
    pmu: &PmuSpec,
    operating_point: &[Complex64],
) -> Result<MeasurementModel, EstimationError> {
    pmu.validate()?;
    let n = net.dim();
    check_len(n, operating_point.len())?;
    let p = net.phases();
    let measured: Vec<usize> = net
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, node)| node.role != NodeRole::ZeroInjection)
        .flat_map(|(i, _)| (0..p).map(move |k| i * p + k))
        .collect();
    let is_zero: Vec<bool> = net
        .nodes()
        .iter()
        .flat_map(|node| std::iter::repeat(node.role == NodeRole::ZeroInjection).take(p))
        .collect();
    let m = measured.len();
    let rows = 2 * m + 2 * n;
    let mut c = RealDense::zeros(rows, 2 * n);
    for (row, &i) in measured.iter().enumerate() {
        c[(row, i)] = 1.0;
        c[(m + row, n + i)] = 1.0;
    }
    let y = net.admittance();
    for i in 0..n {
        for (k, yk) in y.row(i).iter().enumerate() {
            c[(2 * m + i, k)] = yk.re;
            c[(2 * m + i, n + k)] = -yk.im;
            c[(2 * m + n + i, k)] = yk.im;
            c[(2 * m + n + i, n + k)] = yk.re;
        }
    }

    let current = y.matvec(operating_point).expect("dimension checked");
    let mut channels = vec![Channel::Voltage; m];
    channels.extend(is_zero.iter().map(|&z| if z { Channel::Virtual } else { Channel::Current }));
    let magnitudes = measured
        .iter()
        .map(|&i| operating_point[i].norm())
        .chain(current.iter().map(|x| x.norm()));
    let variance: Vec<f64> = channels
        .iter()
        .zip(magnitudes)
        .map(|(&ch, mag)| {
            let (sm, sa) = channel_sigma(ch, pmu, base);
            sm.powi(2).max((mag * sa).powi(2))
        })
        .collect();
    let mut r = Vec::with_capacity(rows);
    r.extend_from_slice(&variance[..m]);
    r.extend_from_slice(&variance[..m]);
    r.extend_from_slice(&variance[m..]);
    r.extend_from_slice(&variance[m..]);

    let x = rectangular(operating_point);
    let y_meas = c.matvec(&x).expect("dimension checked");
    let virtual_channels = is_zero.iter().filter(|z| **z).count();
    let mut model = MeasurementModel::from_parts(c, r, y_meas)?;
    model.channels = channels;
    model.base = *base;
    model.voltage_channels = m;
    model.virtual_channels = virtual_channels;
    model.covariance_rule = Some(CovarianceRule::MaxOfPolarTerms);
    Ok(model)
}

/// `[Re V; Im V]`.
pub fn rectangular(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|x| x.re).chain(v.iter().map(|x| x.im)).collect()
}

pub fn from_rectangular(x: &[f64]) -> Vec<Complex64> {
    let n = x.len() / 2;
    (0..n).map(|i| Complex64::new(x[i], x[n + i])).collect()
}

/// Magnitude and angle σ of a channel, in per unit and radians.
fn channel_sigma(ch: Channel, pmu: &PmuSpec, base: &PerUnitBase) -> (f64, f64) {
    match ch {
        Channel::Voltage => (pmu.voltage_sigma_pu(base), pmu.sigma_angle),
        Channel::Current => (pmu.current_sigma_pu(base), pmu.sigma_angle),
        Channel::Virtual => (pmu.virtual_sigma_pu(base), 0.0),
    }
}

fn perturb(truth: &[f64], model: &MeasurementModel, pmu: &PmuSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut y = truth.to_vec();
    let m = model.voltage_channels;
    let n = model.channels.len() - m;
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    for (k, &ch) in model.channels.iter().enumerate() {
        if ch == Channel::Virtual {
            continue;
        }
        let (sm, sa) = channel_sigma(ch, pmu, &model.base);
        let (dm, da) = (sm * std.sample(rng), sa * std.sample(rng));
        if dm == 0.0 && da == 0.0 {
            continue;
        }
        let (re, im) = if k < m { (k, m + k) } else { (2 * m + (k - m), 2 * m + n + (k - m)) };
        let z = Complex64::new(y[re], y[im]);
        let noisy = Complex64::from_polar(z.norm() + dm, z.arg() + da);
        y[re] = noisy.re;
        y[im] = noisy.im;
    }
    y
}

/// Noisy PMU readings of the true voltages `truth`.
///
/// Magnitude and angle of each measured phasor receive independent Gaussian
/// noise with the σ of `pmu` (zero is allowed); virtual channels stay
/// exactly zero.
pub fn emulate_pmu(
    truth: &[Complex64],
    model: &MeasurementModel,
    pmu: &PmuSpec,
    seed: u64,
) -> Result<Vec<f64>, EstimationError> {
    check_noise(pmu)?;
    check_len(model.state_dim() / 2, truth.len())?;
    let y = model.c.matvec(&rectangular(truth)).expect("dimension checked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(perturb(&y, model, pmu, &mut rng))
}

fn check_noise(pmu: &PmuSpec) -> Result<(), EstimationError> {
    let ok = [pmu.sigma_magnitude, pmu.sigma_angle].iter().all(|v| v.is_finite() && *v >= 0.0)
        && [pmu.fsr_voltage, pmu.fsr_current, pmu.virtual_scale].iter().all(|v| v.is_finite() && *v > 0.0);
    if ok {
        Ok(())
    } else {
        Err(EstimationError::InvalidPmu(format!("{pmu:?}")))
    }
}

/// Maximum number of iterative-refinement passes on the normal equations.
pub const REFINEMENT_STEPS: usize = 3;

/// Solves the normal equations and refines with the residual `y − C x`
/// evaluated from the measurement model, which keeps the error near
/// `cond(C)` rather than `cond(G)` times the unit roundoff.
fn normal_solve(m: &MeasurementModel, lu: &LuFactors<f64>, y: &[f64]) -> Result<Vec<f64>, EstimationError> {
    let mut x = lu.solve_vec(&m.weighted_rhs(y)).map_err(EstimationError::SingularGain)?;
    for _ in 0..REFINEMENT_STEPS {
        let fit = m.c.matvec(&x).expect("dimension checked");
        let res: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
        let dx = lu.solve_vec(&m.weighted_rhs(&res)).map_err(EstimationError::SingularGain)?;
        let step = dx.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        if step <= f64::EPSILON * x.iter().fold(0.0f64, |a, v| a.max(v.abs())) {
            break;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub x_hat: Vec<f64>,
    pub gain_condition: Option<f64>,
    /// `‖R^{-1/2} (y − C x̂)‖₂`.
    pub residual_norm: f64,
}

impl EstimateResult {
    pub fn voltages(&self) -> Vec<Complex64> {
        from_rectangular(&self.x_hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WlsOptions {
    pub condition: bool,
}

impl Default for WlsOptions {
    fn default() -> Self {
        Self { condition: true }
    }
}

pub fn wls_solve(m: &MeasurementModel) -> Result<EstimateResult, EstimationError> {
    wls_solve_with(m, &WlsOptions::default())
}

/// `x̂ = G⁻¹ Cᵀ R⁻¹ y` via an LU factorization of the gain `G = Cᵀ R⁻¹ C`.
pub fn wls_solve_with(m: &MeasurementModel, opts: &WlsOptions) -> Result<EstimateResult, EstimationError> {
    let gain = m.gain();
    let gain_condition = if opts.condition {
        Some(condition_number_2(&gain).map_err(EstimationError::SingularGain)?)
    } else {
        None
    };
    let lu = LuFactors::factor_owned(gain).map_err(EstimationError::SingularGain)?;
    let x_hat = normal_solve(m, &lu, &m.y)?;
    let residual_norm = weighted_residual_norm(m, &m.y, &x_hat);
    Ok(EstimateResult {
        x_hat,
        gain_condition,
        residual_norm,
    })
}

fn weighted_residual_norm(m: &MeasurementModel, y: &[f64], x: &[f64]) -> f64 {
    let fit = m.c.matvec(x).expect("dimension checked");
    y.iter()
        .zip(&fit)
        .zip(&m.r)
        .map(|((a, b), r)| (a - b).powi(2) / r)
        .sum::<f64>()
        .sqrt()
}

/// Root-mean-square complex error between two voltage vectors.
pub fn rmse(a: &[Complex64], b: &[Complex64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    (s / a.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub draws: usize,
    /// Mean of `x̂ − x_true` per state component.
    pub mean_error: Vec<f64>,
    /// `sqrt(diag(G⁻¹))` per state component.
    pub estimator_sigma: Vec<f64>,
    /// `max_k |mean_error_k| / (estimator_sigma_k / √draws)`.
    pub max_normalized_bias: f64,
    /// Mean RMS voltage error over draws.
    pub mean_rmse: f64,
    /// Mean RMS of the estimated injected currents at virtual channels,
    /// whose true value is zero.
    pub mean_virtual_current: f64,
}

/// Repeats emulation and estimation `draws` times. Draw `d` uses stream `d`
/// of a ChaCha generator seeded with `root_seed`, so the result does not
/// depend on the number of worker threads.
pub fn monte_carlo(
    model: &MeasurementModel,
    truth: &[Complex64],
    pmu: &PmuSpec,
    draws: usize,
    root_seed: u64,
) -> Result<MonteCarloSummary, EstimationError> {
    if draws == 0 {
        return Err(EstimationError::NoDraws);
    }
    check_noise(pmu)?;
    check_len(model.state_dim() / 2, truth.len())?;
    let x_true = rectangular(truth);
    let y_true = model.c.matvec(&x_true).expect("dimension checked");
    let lu = model.gain_factors()?;
    let dim = model.state_dim();

    let m = model.voltage_channels;
    let virtual_rows: Vec<usize> = model.channels[m..]
        .iter()
        .enumerate()
        .filter(|(_, ch)| **ch == Channel::Virtual)
        .map(|(i, _)| i)
        .collect();
    let n_cur = model.channels.len() - m;
    let virtual_rms = |x: &[f64]| -> f64 {
        if virtual_rows.is_empty() {
            return 0.0;
        }
        let s: f64 = virtual_rows
            .iter()
            .map(|&i| {
                let re: f64 = model.c.row(2 * m + i).iter().zip(x).map(|(a, b)| a * b).sum();
                let im: f64 = model.c.row(2 * m + n_cur + i).iter().zip(x).map(|(a, b)| a * b).sum();
                re * re + im * im
            })
            .sum();
        (s / virtual_rows.len() as f64).sqrt()
    };

    let errors: Vec<(Vec<f64>, f64)> = (0..draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
            rng.set_stream(d);
            let y = perturb(&y_true, model, pmu, &mut rng);
            let x = normal_solve(model, &lu, &y)?;
            let vc = virtual_rms(&x);
            Ok((x.iter().zip(&x_true).map(|(a, b)| a - b).collect(), vc))
        })
        .collect::<Result<_, EstimationError>>()?;

    let mut mean_error = vec![0.0; dim];
    let mut rmse_sum = 0.0;
    let mut virtual_sum = 0.0;
    for (e, vc) in &errors {
        virtual_sum += vc;
        for (m, v) in mean_error.iter_mut().zip(e) {
            *m += v;
        }
        rmse_sum += (e.iter().map(|v| v * v).sum::<f64>() / (dim / 2).max(1) as f64).sqrt();
    }
    for m in &mut mean_error {
        *m /= draws as f64;
    }
    let inverse = lu.solve(&RealDense::identity(dim)).map_err(EstimationError::SingularGain)?;
    let estimator_sigma: Vec<f64> = (0..dim).map(|k| inverse[(k, k)].sqrt()).collect();
    let root = (draws as f64).sqrt();
    let max_normalized_bias = mean_error
        .iter()
        .zip(&estimator_sigma)
        .fold(0.0f64, |acc, (e, s)| acc.max(e.abs() / (s / root)));
    Ok(MonteCarloSummary {
        draws,
        mean_error,
        estimator_sigma,
        max_normalized_bias,
        mean_rmse: rmse_sum / draws as f64,
        mean_virtual_current: virtual_sum / draws as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{Coefficients, DeviceSet, PolynomialModel, PolynomialPhase, TheveninEquivalent};
    use crate::grid::{Branch, GridModel, Node};
    use crate::linalg::ComplexDense;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn devices(slack: &str, resources: &[&str]) -> DeviceSet {
        let phase = PolynomialPhase {
            p0: -0.1,
            q0: -0.02,
            v0: 1.0,
            real: Coefficients::CONSTANT_POWER,
            imag: Coefficients::CONSTANT_POWER,
        };
        DeviceSet {
            thevenin: vec![TheveninEquivalent::new(slack, vec![c(1.0, 0.0)], ComplexDense::diagonal(&[c(0.01, 0.1)])).unwrap()],
            polynomial: resources.iter().map(|r| PolynomialModel::new(*r, vec![phase]).unwrap()).collect(),
        }
    }

    fn two_node() -> (Network, PerUnitBase) {
        let z = ComplexDense::diagonal(&[c(0.01, 0.04)]);
        let grid = GridModel::new(
            1,
            vec![Node::new("A", NodeRole::Slack), Node::new("B", NodeRole::Resource)],
            vec![Branch { from: "A".into(), to: "B".into(), impedance: z }],
            vec![],
            PerUnitBase::new(10e6, 24.9e3).unwrap(),
        )
        .unwrap();
        let net = Network::full(&grid, &devices("A", &["B"])).unwrap();
        (net, grid.base())
    }

    /// Chain S - Z1 - R1 - Z2 - R2 (single phase).
    fn chain() -> (Network, PerUnitBase) {
        let z = |r: f64, x: f64| ComplexDense::diagonal(&[c(r, x)]);
        let ids = ["S", "Z1", "R1", "Z2", "R2"];
        let roles = [NodeRole::Slack, NodeRole::ZeroInjection, NodeRole::Resource, NodeRole::ZeroInjection, NodeRole::Resource];
        let nodes = ids.iter().zip(roles).map(|(i, r)| Node::new(*i, r)).collect();
        let branches = ids
            .windows(2)
            .enumerate()
            .map(|(k, w)| Branch { from: w[0].into(), to: w[1].into(), impedance: z(0.01 + 0.002 * k as f64, 0.03) })
            .collect();
        let base = PerUnitBase::new(10e6, 24.9e3).unwrap();
        let grid = GridModel::new(1, nodes, branches, vec![], base).unwrap();
        (Network::full(&grid, &devices("S", &["R1", "R2"])).unwrap(), base)
    }

    /// Canonical order is S, R1, R2, Z1, Z2; Z voltages follow from zero current.
    fn chain_truth(net: &Network) -> Vec<Complex64> {
        let mut v = vec![c(1.0, 0.0), Complex64::from_polar(0.97, -0.02), Complex64::from_polar(0.95, -0.035), c(0.0, 0.0), c(0.0, 0.0)];
        let y = net.admittance();
        let yzz = ComplexDense::from_fn(2, 2, |a, b| y[(3 + a, 3 + b)]);
        let rhs: Vec<Complex64> = (3..5).map(|z| -(0..3).map(|k| y[(z, k)] * v[k]).sum::<Complex64>()).collect();
        let vz = crate::linalg::LuFactors::factor(&yzz).unwrap().solve_vec(&rhs).unwrap();
        v[3] = vz[0];
        v[4] = vz[1];
        v
    }

    #[test]
    fn pmu_base_conversions() {
        let base = PerUnitBase::new(10e6, 24.9e3).unwrap();
        let pmu = PmuSpec::default();
        let fsr_pu = 20e3 / (24.9e3 / 3f64.sqrt());
        assert!((fsr_pu - 1.391).abs() < 1e-3);
        assert!((pmu.voltage_sigma_pu(&base) - 1e-3 * fsr_pu).abs() < 1e-15);
        let ib = 10e6 / (3f64.sqrt() * 24.9e3);
        assert!((ib - 231.9).abs() < 0.05);
        assert!((pmu.current_sigma_pu(&base) - 1e-3 * 100.0 / ib).abs() < 1e-15);
        assert!((pmu.virtual_sigma_pu(&base) - pmu.current_sigma_pu(&base) / 100.0).abs() < 1e-18);
        assert!(PmuSpec { sigma_angle: 0.0, ..pmu }.validate().is_err());
    }

    #[test]
    fn two_node_measurement_matrix() {
        let (net, base) = two_node();
        let v = [c(1.0, 0.0), Complex64::from_polar(0.98, -0.01)];
        let model = build_measurement_model(&net, &base, &PmuSpec::default(), &v).unwrap();
        let yb = 1.0 / c(0.01, 0.04);
        let (g, b) = (yb.re, yb.im);
        #[rustfmt::skip]
        let expected = RealDense::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![g, -g, -b, b],
            vec![-g, g, b, -b],
            vec![b, -b, g, -g],
            vec![-b, b, -g, g],
        ])
        .unwrap();
        assert!(model.c().max_abs_diff(&expected) < 1e-9);
        assert_eq!(model.virtual_channels(), 0);
        // voltage channels: max(σ_V², (|V| σ_θ)²) on both rows
        let sv = 1e-3 * 20e3 / (24.9e3 / 3f64.sqrt());
        let r = model.covariance_diagonal();
        assert!((r[0] - sv.max(1.5e-3).powi(2)).abs() < 1e-18);
        assert!((r[2] - r[0]).abs() == 0.0);
        assert!((r[1] - sv.max(0.98 * 1.5e-3).powi(2)).abs() < 1e-18);
    }

    #[test]
    fn virtual_rows_use_scaled_current_sigma() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let pmu = PmuSpec::default();
        let model = build_measurement_model(&net, &base, &pmu, &v).unwrap();
        assert_eq!(model.voltage_channels(), 3);
        assert_eq!(model.virtual_channels(), 2);
        let r = model.covariance_diagonal();
        let sigma = pmu.current_sigma_pu(&base) / 100.0;
        // current rows start at 2 * 3; Z nodes sit at positions 3 and 4
        for row in [6 + 3, 6 + 4, 6 + 5 + 3, 6 + 5 + 4] {
            assert!((r[row] - sigma * sigma).abs() < 1e-22, "row {row}");
        }
        // virtual measurements are exact zeros
        let y = model.measurements();
        assert!(y[9].abs() < 1e-12 && y[14].abs() < 1e-12);
    }

    #[test]
    fn noiseless_recovers_truth() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let model = build_measurement_model(&net, &base, &PmuSpec::default(), &v).unwrap();
        let est = wls_solve(&model).unwrap();
        for (a, b) in est.voltages().iter().zip(&v) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(est.gain_condition.unwrap() > 1.0);
    }

    #[test]
    fn scalar_mean() {
        let cm = RealDense::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let m = MeasurementModel::from_parts(cm, vec![0.5, 0.5], vec![1.1, 0.9]).unwrap();
        let est = wls_solve(&m).unwrap();
        assert!((est.x_hat[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_rejected() {
        let cm = RealDense::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(
            MeasurementModel::from_parts(cm, vec![1.0, 1.0], vec![0.0, 0.0]),
            Err(EstimationError::RankDeficient(_))
        ));
    }

    #[test]
    fn zero_noise_is_exact_and_seeds_are_deterministic() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let pmu = PmuSpec::default();
        let model = build_measurement_model(&net, &base, &pmu, &v).unwrap();
        let quiet = PmuSpec { sigma_magnitude: 0.0, sigma_angle: 0.0, ..pmu };
        assert_eq!(emulate_pmu(&v, &model, &quiet, 1).unwrap(), model.measurements());
        let noisy = |seed| emulate_pmu(&v, &model, &pmu, seed).unwrap();
        assert_eq!(noisy(9), noisy(9));
        assert_ne!(noisy(9), noisy(10));
    }

    #[test]
    fn emulated_noise_statistics() {
        let (net, base) = two_node();
        let v = [c(1.0, 0.0), Complex64::from_polar(0.98, -0.3)];
        let pmu = PmuSpec::default();
        let model = build_measurement_model(&net, &base, &pmu, &v).unwrap();
        let draws = 10_000;
        let (mut mag, mut ang) = (Vec::new(), Vec::new());
        for seed in 0..draws {
            let y = emulate_pmu(&v, &model, &pmu, seed).unwrap();
            // channel 1: voltage of node B
            let z = c(y[1], y[3]);
            mag.push(z.norm() - v[1].norm());
            ang.push(z.arg() - v[1].arg());
        }
        let std = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            (x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
        };
        let sv = pmu.voltage_sigma_pu(&base);
        assert!((std(&mag) / sv - 1.0).abs() < 0.05);
        assert!((std(&ang) / pmu.sigma_angle - 1.0).abs() < 0.05);
    }

    #[test]
    fn weighted_residual_is_orthogonal() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let model = build_measurement_model(&net, &base, &PmuSpec::default(), &v).unwrap();
        let y = emulate_pmu(&v, &model, &PmuSpec::default(), 4).unwrap();
        let model = model.with_measurements(y).unwrap();
        let est = wls_solve(&model).unwrap();
        let res = model.weighted_residual(&est.x_hat).unwrap();
        let scale = model.weighted_rhs(model.measurements()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(res.iter().all(|r| r.abs() <= 1e-8 * scale));
    }

    #[test]
    fn covariance_scaling_leaves_estimate_unchanged() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let model = build_measurement_model(&net, &base, &PmuSpec::default(), &v).unwrap();
        let y = emulate_pmu(&v, &model, &PmuSpec::default(), 5).unwrap();
        let a = wls_solve(&model.clone().with_measurements(y.clone()).unwrap()).unwrap();
        let scaled = MeasurementModel::from_parts(
            model.c().clone(),
            model.covariance_diagonal().iter().map(|r| r * 37.0).collect(),
            y,
        )
        .unwrap();
        let b = wls_solve(&scaled).unwrap();
        for (p, q) in a.x_hat.iter().zip(&b.x_hat) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn monte_carlo_is_unbiased_and_thread_independent() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let model = build_measurement_model(&net, &base, &PmuSpec::default(), &v).unwrap();
        let summary = monte_carlo(&model, &v, &PmuSpec::default(), 1000, 42).unwrap();
        assert!(summary.max_normalized_bias < 4.0, "{summary:?}");
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let again = single.install(|| monte_carlo(&model, &v, &PmuSpec::default(), 1000, 42).unwrap());
        assert_eq!(summary, again);
    }

    #[test]
    fn smaller_virtual_sigma_trades_error_for_conditioning() {
        let (net, base) = chain();
        let v = chain_truth(&net);
        let mut last: Option<(f64, f64)> = None;
        for scale in [10.0, 100.0, 1000.0] {
            let pmu = PmuSpec { virtual_scale: scale, ..PmuSpec::default() };
            let model = build_measurement_model(&net, &base, &pmu, &v).unwrap();
            let cond = condition_number_2(&model.gain()).unwrap();
            let err = monte_carlo(&model, &v, &pmu, 400, 11).unwrap().mean_virtual_current;
            if let Some((e, k)) = last {
                assert!(err <= e, "error {err} vs {e}");
                assert!(cond > k);
            }
            last = Some((err, cond));
        }
    }

    #[test]
    fn rectangular_round_trip() {
        let v = vec![c(1.0, -0.5), Complex64::from_polar(0.9, 2.0 * PI / 3.0)];
        assert_eq!(from_rectangular(&rectangular(&v)), v);
    }
}
