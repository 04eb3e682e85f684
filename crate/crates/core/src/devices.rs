//! Aggregate node behavior: Thévenin equivalents at slack nodes, polynomial
//! (ZIP-type) models at resource nodes, and loading-factor profiles.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Node, NodeRole};
use crate::linalg::{ComplexDense, LuFactors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("Thévenin impedance at `{0}` is singular")]
    SingularTheveninImpedance(String),
    #[error("{what} at `{node}`: expected {expected} phases, got {got}")]
    PhaseMismatch {
        what: &'static str,
        node: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error("reference voltage at `{node}` must be positive, got {v0}")]
    NonPositiveReference { node: String, v0: f64 },
    #[error("coefficients at `{0}` sum to zero and cannot be normalized")]
    DegenerateCoefficients(String),
    #[error("no {role} device for node `{node}`")]
    MissingDevice { role: NodeRole, node: String },
    #[error("device attached to `{node}`, which is not a {role} node")]
    MisplacedDevice { role: NodeRole, node: String },
    #[error("vector length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loading factor must be finite")]
    NonFiniteLoading,
    #[error("profile has no time step {0}")]
    MissingTimeStep(usize),
    #[error("profile has no series for node `{0}`")]
    MissingSeries(String),
    #[error("profile for `{node}` has {got} entries, expected {expected}")]
    RaggedProfile {
        node: String,
        expected: usize,
        got: usize,
    },
}

/// Slack-node model: voltage source `V_TE` behind compound impedance `Z_TE`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheveninEquivalent {
    node: String,
    source: Vec<Complex64>,
    impedance: ComplexDense,
    admittance: ComplexDense,
}

impl TheveninEquivalent {
    pub fn new(
        node: impl Into<String>,
        source: Vec<Complex64>,
        impedance: ComplexDense,
    ) -> Result<Self, DeviceError> {
        let node = node.into();
        let p = source.len();
        if impedance.rows() != p || impedance.cols() != p {
            return Err(DeviceError::PhaseMismatch {
                what: "Thévenin impedance",
                node,
                expected: p,
                got: impedance.rows(),
            });
        }
        if source.iter().any(|v| !v.is_finite()) || !impedance.is_finite() {
            return Err(DeviceError::NonFinite(format!("Thévenin equivalent at {node}")));
        }
        let admittance = LuFactors::factor(&impedance)
            .and_then(|lu| lu.solve(&ComplexDense::identity(p)))
            .map_err(|_| DeviceError::SingularTheveninImpedance(node.clone()))?;
        Ok(Self {
            node,
            source,
            impedance,
            admittance,
        })
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn phases(&self) -> usize {
        self.source.len()
    }

    pub fn source(&self) -> &[Complex64] {
        &self.source
    }

    pub fn impedance(&self) -> &ComplexDense {
        &self.impedance
    }

    pub fn admittance(&self) -> &ComplexDense {
        &self.admittance
    }

    /// Current delivered by an ideal short at the terminals, `Y_TE · V_TE`.
    pub fn source_current(&self) -> Vec<Complex64> {
        self.admittance.matvec(&self.source).expect("shape checked")
    }

    /// `S_TE(V_s) = V_s ∘ conj(Y_TE (V_TE − V_s))`.
    pub fn power(&self, v_s: &[Complex64]) -> Result<Vec<Complex64>, DeviceError> {
        if v_s.len() != self.phases() {
            return Err(DeviceError::DimensionMismatch {
                expected: self.phases(),
                got: v_s.len(),
            });
        }
        let dv: Vec<Complex64> = self.source.iter().zip(v_s).map(|(a, b)| a - b).collect();
        let i = self.admittance.matvec(&dv).expect("shape checked");
        Ok(v_s.iter().zip(&i).map(|(v, i)| v * i.conj()).collect())
    }
}

/// `f(v) = α (v/V0)² + β (v/V0) + γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Coefficients {
    pub const CONSTANT_POWER: Self = Self {
        alpha: 0.0,
        beta: 0.0,
        gamma: 1.0,
    };
    pub const CONSTANT_CURRENT: Self = Self {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
    };
    pub const CONSTANT_IMPEDANCE: Self = Self {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn sum(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }

    pub fn eval(&self, magnitude: f64, v0: f64) -> f64 {
        let r = magnitude / v0;
        (self.alpha * r + self.beta) * r + self.gamma
    }

    /// Derivative with respect to the voltage magnitude.
    pub fn derivative(&self, magnitude: f64, v0: f64) -> f64 {
        (2.0 * self.alpha * magnitude / v0 + self.beta) / v0
    }

    fn normalized(self) -> Option<Self> {
        let s = self.sum();
        (s != 0.0 && s.is_finite()).then(|| Self {
            alpha: self.alpha / s,
            beta: self.beta / s,
            gamma: self.gamma / s,
        })
    }
}

/// Reference values and coefficients of one phase of a polynomial model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolynomialPhase {
    pub p0: f64,
    pub q0: f64,
    pub v0: f64,
    pub real: Coefficients,
    pub imag: Coefficients,
}

impl PolynomialPhase {
    fn power(&self, magnitude: f64, lambda: f64) -> Complex64 {
        Complex64::new(
            lambda * self.p0 * self.real.eval(magnitude, self.v0),
            lambda * self.q0 * self.imag.eval(magnitude, self.v0),
        )
    }

    fn power_derivative(&self, magnitude: f64, lambda: f64) -> Complex64 {
        Complex64::new(
            lambda * self.p0 * self.real.derivative(magnitude, self.v0),
            lambda * self.q0 * self.imag.derivative(magnitude, self.v0),
        )
    }
}

/// Resource-node model: per-phase injected power, quadratic in `|V|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialModel {
    node: String,
    phases: Vec<PolynomialPhase>,
}

impl PolynomialModel {
    /// Builds the model, rescaling every coefficient triplet so that it sums
    /// to one (then `f(V0) = 1` and `(P0, Q0)` is the power at `V0`).
    pub fn new(node: impl Into<String>, phases: Vec<PolynomialPhase>) -> Result<Self, DeviceError> {
        let node = node.into();
        let mut out = Vec::with_capacity(phases.len());
        for ph in phases {
            let values = [
                ph.p0,
                ph.q0,
                ph.v0,
                ph.real.alpha,
                ph.real.beta,
                ph.real.gamma,
                ph.imag.alpha,
                ph.imag.beta,
                ph.imag.gamma,
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(DeviceError::NonFinite(format!("polynomial model at {node}")));
            }
            if ph.v0 <= 0.0 {
                return Err(DeviceError::NonPositiveReference {
                    node,
                    v0: ph.v0,
                });
            }
            let mut fixed = ph;
            for coeffs in [&mut fixed.real, &mut fixed.imag] {
                if (coeffs.sum() - 1.0).abs() > 1e-12 {
                    log::warn!(
                        "coefficients at `{node}` sum to {} and are renormalized",
                        coeffs.sum()
                    );
                    *coeffs = coeffs
                        .normalized()
                        .ok_or_else(|| DeviceError::DegenerateCoefficients(node.clone()))?;
                }
            }
            out.push(fixed);
        }
        Ok(Self { node, phases: out })
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn phase_data(&self) -> &[PolynomialPhase] {
        &self.phases
    }

    /// `S_p = λ (P0 f_Re(|V_p|) + j Q0 f_Im(|V_p|))` for each phase.
    pub fn power(&self, v_r: &[Complex64], lambda: f64) -> Result<Vec<Complex64>, DeviceError> {
        self.check_len(v_r.len())?;
        Ok(self
            .phases
            .iter()
            .zip(v_r)
            .map(|(ph, v)| ph.power(v.norm(), lambda))
            .collect())
    }

    /// Same as [`power`](Self::power) from magnitudes directly.
    pub fn power_from_magnitudes(&self, magnitudes: &[f64], lambda: f64) -> Vec<Complex64> {
        self.phases
            .iter()
            .zip(magnitudes)
            .map(|(ph, &e)| ph.power(e, lambda))
            .collect()
    }

    /// `∂S_p / ∂|V_p|` for each phase.
    pub fn power_derivative(&self, magnitudes: &[f64], lambda: f64) -> Vec<Complex64> {
        self.phases
            .iter()
            .zip(magnitudes)
            .map(|(ph, &e)| ph.power_derivative(e, lambda))
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<(), DeviceError> {
        if len != self.phases.len() {
            return Err(DeviceError::DimensionMismatch {
                expected: self.phases.len(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Loading-factor time series per resource node. One factor per node and
/// time step; all phases of a node share it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadingProfile {
    steps: usize,
    series: BTreeMap<String, Vec<f64>>,
}

impl LoadingProfile {
    pub fn new(series: BTreeMap<String, Vec<f64>>) -> Result<Self, DeviceError> {
        let steps = series.values().map(Vec::len).max().unwrap_or(0);
        for (node, s) in &series {
            if s.len() != steps {
                return Err(DeviceError::RaggedProfile {
                    node: node.clone(),
                    expected: steps,
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(DeviceError::NonFiniteLoading);
            }
        }
        Ok(Self { steps, series })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn series(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.series
    }

    pub fn value(&self, node: &str, step: usize) -> Result<f64, DeviceError> {
        let s = self
            .series
            .get(node)
            .ok_or_else(|| DeviceError::MissingSeries(node.to_string()))?;
        s.get(step).copied().ok_or(DeviceError::MissingTimeStep(step))
    }
}

#[derive(Debug, Clone, Default)]
pub struct DeviceSet {
    pub thevenin: Vec<TheveninEquivalent>,
    pub polynomial: Vec<PolynomialModel>,
}

impl DeviceSet {
    pub fn thevenin_for(&self, node: &str) -> Option<&TheveninEquivalent> {
        self.thevenin.iter().find(|t| t.node == node)
    }

    pub fn polynomial_for(&self, node: &str) -> Option<&PolynomialModel> {
        self.polynomial.iter().find(|m| m.node == node)
    }
}

/// Devices resolved against an ordered node list (canonical order, possibly
/// after Kron reduction).
#[derive(Debug, Clone)]
pub struct DeviceBinding {
    phases: usize,
    dim: usize,
    /// (node position, device)
    slack: Vec<(usize, TheveninEquivalent)>,
    resource: Vec<(usize, PolynomialModel)>,
}

impl DeviceBinding {
    pub fn bind(devices: &DeviceSet, nodes: &[Node], phases: usize) -> Result<Self, DeviceError> {
        let by_te: HashMap<&str, &TheveninEquivalent> =
            devices.thevenin.iter().map(|t| (t.node(), t)).collect();
        let by_pm: HashMap<&str, &PolynomialModel> =
            devices.polynomial.iter().map(|m| (m.node(), m)).collect();
        let roles: HashMap<&str, NodeRole> = nodes.iter().map(|n| (n.id.as_str(), n.role)).collect();
        for te in &devices.thevenin {
            if roles.get(te.node()).is_some_and(|r| *r != NodeRole::Slack) {
                return Err(DeviceError::MisplacedDevice {
                    role: NodeRole::Slack,
                    node: te.node().to_string(),
                });
            }
        }
        for pm in &devices.polynomial {
            if roles.get(pm.node()).is_some_and(|r| *r != NodeRole::Resource) {
                return Err(DeviceError::MisplacedDevice {
                    role: NodeRole::Resource,
                    node: pm.node().to_string(),
                });
            }
        }
        let mut slack = Vec::new();
        let mut resource = Vec::new();
        for (pos, n) in nodes.iter().enumerate() {
            match n.role {
                NodeRole::Slack => {
                    let te = by_te.get(n.id.as_str()).ok_or_else(|| DeviceError::MissingDevice {
                        role: NodeRole::Slack,
                        node: n.id.clone(),
                    })?;
                    if te.phases() != phases {
                        return Err(DeviceError::PhaseMismatch {
                            what: "Thévenin equivalent",
                            node: n.id.clone(),
                            expected: phases,
                            got: te.phases(),
                        });
                    }
                    slack.push((pos, (*te).clone()));
                }
                NodeRole::Resource => {
                    let pm = by_pm.get(n.id.as_str()).ok_or_else(|| DeviceError::MissingDevice {
                        role: NodeRole::Resource,
                        node: n.id.clone(),
                    })?;
                    if pm.phase_count() != phases {
                        return Err(DeviceError::PhaseMismatch {
                            what: "polynomial model",
                            node: n.id.clone(),
                            expected: phases,
                            got: pm.phase_count(),
                        });
                    }
                    resource.push((pos, (*pm).clone()));
                }
                NodeRole::ZeroInjection => {}
            }
        }
        Ok(Self {
            phases,
            dim: nodes.len() * phases,
            slack,
            resource,
        })
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slack(&self) -> &[(usize, TheveninEquivalent)] {
        &self.slack
    }

    pub fn resource(&self) -> &[(usize, PolynomialModel)] {
        &self.resource
    }

    /// Number of loading factors expected: one per resource node.
    pub fn loading_len(&self) -> usize {
        self.resource.len()
    }

    pub fn check_loading(&self, lambda: &[f64]) -> Result<(), DeviceError> {
        if lambda.len() != self.resource.len() {
            return Err(DeviceError::DimensionMismatch {
                expected: self.resource.len(),
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(DeviceError::NonFiniteLoading);
        }
        Ok(())
    }

    /// Stacked device powers: Thévenin powers on slack blocks, polynomial
    /// powers on resource blocks, exact zeros on zero-injection blocks.
    pub fn stack_powers(&self, v: &[Complex64], lambda: &[f64]) -> Result<Vec<Complex64>, DeviceError> {
        if v.len() != self.dim {
            return Err(DeviceError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        self.check_loading(lambda)?;
        let p = self.phases;
        let mut out = vec![Complex64::new(0.0, 0.0); self.dim];
        for (pos, te) in &self.slack {
            let s = te.power(&v[pos * p..(pos + 1) * p])?;
            out[pos * p..(pos + 1) * p].copy_from_slice(&s);
        }
        for ((pos, pm), &l) in self.resource.iter().zip(lambda) {
            let s = pm.power(&v[pos * p..(pos + 1) * p], l)?;
            out[pos * p..(pos + 1) * p].copy_from_slice(&s);
        }
        Ok(out)
    }

    /// Loading factors of every bound resource node at a profile time step.
    /// Nodes absent from the profile keep a factor of one.
    pub fn loading_at(&self, profile: &LoadingProfile, step: usize) -> Result<Vec<f64>, DeviceError> {
        if step >= profile.steps() {
            return Err(DeviceError::MissingTimeStep(step));
        }
        Ok(self
            .resource
            .iter()
            .map(|(_, pm)| profile.value(pm.node(), step).unwrap_or(1.0))
            .collect())
    }
}
