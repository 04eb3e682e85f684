//! Polyphase grid model: nodes, compound branch impedances, shunt
//! admittances and the assembled compound admittance matrix.
//!
//! All quantities are per-unit. Nodes are kept in canonical order
//! (slack, then resource, then zero-injection; input order preserved
//! within a role) and every node carries the full phase set, so the flat
//! index of phase `p` at node position `n` is `n * phases + p`.

use std::collections::HashMap;
use std::fmt;

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{ComplexDense, Dense, LuFactors, RealDense};

/// Entrywise symmetry tolerance for compound parameters.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid must have at least one phase")]
    NoPhases,
    #[error("grid has no nodes")]
    NoNodes,
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("branch {index} connects node `{node}` to itself")]
    SelfLoop { index: usize, node: String },
    #[error("{what}: expected a {expected}x{expected} matrix, got {rows}x{cols}")]
    BadParameterShape {
        what: String,
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{0}: non-finite parameter")]
    NonFiniteParameter(String),
    #[error("branch graph is not weakly connected ({components} components)")]
    DisconnectedGraph { components: usize },
    #[error("{what} is not symmetric (max deviation {deviation:.3e})")]
    NonSymmetricParameter { what: String, deviation: f64 },
    #[error("impedance of branch {from}-{to} is singular")]
    SingularBranchImpedance { from: String, to: String },
    #[error("shunt admittance at `{0}` is nonzero but singular")]
    SingularShunt(String),
    #[error("voltage vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid per-unit base: {0}")]
    InvalidBase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Slack,
    Resource,
    ZeroInjection,
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::Slack => "slack",
            NodeRole::Resource => "resource",
            NodeRole::ZeroInjection => "zero_injection",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub role: NodeRole,
}

impl Node {
    pub fn new(id: impl Into<String>, role: NodeRole) -> Self {
        Self {
            id: id.into(),
            role,
        }
    }
}

/// Per-unit system defined by a three-phase base power and a line-to-line
/// base voltage. Phase quantities use `Vb/√3` and `Pb/3`, which gives
/// `Zb = Vb²/Pb` and `Ib = Pb/(√3·Vb)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub power_w: f64,
    pub voltage_ll_v: f64,
}

impl PerUnitBase {
    pub fn new(power_w: f64, voltage_ll_v: f64) -> Result<Self, GridError> {
        if !(power_w.is_finite() && power_w > 0.0 && voltage_ll_v.is_finite() && voltage_ll_v > 0.0)
        {
            return Err(GridError::InvalidBase(format!(
                "Pb = {power_w} W, Vb = {voltage_ll_v} V"
            )));
        }
        Ok(Self {
            power_w,
            voltage_ll_v,
        })
    }

    pub fn impedance_ohm(&self) -> f64 {
        self.voltage_ll_v * self.voltage_ll_v / self.power_w
    }

    pub fn current_a(&self) -> f64 {
        self.power_w / (3f64.sqrt() * self.voltage_ll_v)
    }

    pub fn phase_voltage_v(&self) -> f64 {
        self.voltage_ll_v / 3f64.sqrt()
    }
}

impl Default for PerUnitBase {
    fn default() -> Self {
        Self {
            power_w: 1.0,
            voltage_ll_v: 3f64.sqrt(),
        }
    }
}

/// Polyphase branch with its compound series impedance.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: String,
    pub to: String,
    pub impedance: ComplexDense,
}

/// Compound shunt admittance to ground; may be the zero matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Shunt {
    pub node: String,
    pub admittance: ComplexDense,
}

#[derive(Debug, Clone)]
struct ResolvedBranch {
    from: usize,
    to: usize,
    impedance: ComplexDense,
}

#[derive(Debug, Clone)]
pub struct GridModel {
    phases: usize,
    nodes: Vec<Node>,
    position: HashMap<String, usize>,
    branches: Vec<ResolvedBranch>,
    shunts: Vec<(usize, ComplexDense)>,
    base: PerUnitBase,
}

fn check_shape(what: impl Fn() -> String, m: &ComplexDense, p: usize) -> Result<(), GridError> {
    if m.rows() != p || m.cols() != p {
        return Err(GridError::BadParameterShape {
            what: what(),
            expected: p,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(GridError::NonFiniteParameter(what()));
    }
    Ok(())
}

impl GridModel {
    /// Assembles a grid, reordering nodes canonically. Structural errors are
    /// reported here; electrical hypotheses are checked by
    /// [`validate_hypotheses`] and [`build_admittance`].
    pub fn new(
        phases: usize,
        nodes: Vec<Node>,
        branches: Vec<Branch>,
        shunts: Vec<Shunt>,
        base: PerUnitBase,
    ) -> Result<Self, GridError> {
        if phases == 0 {
            return Err(GridError::NoPhases);
        }
        if nodes.is_empty() {
            return Err(GridError::NoNodes);
        }
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.role); // stable
        let mut position = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if position.insert(n.id.clone(), i).is_some() {
                return Err(GridError::DuplicateNode(n.id.clone()));
            }
        }
        let lookup = |id: &str| {
            position
                .get(id)
                .copied()
                .ok_or_else(|| GridError::UnknownNode(id.to_string()))
        };

        let mut resolved = Vec::with_capacity(branches.len());
        for (index, b) in branches.into_iter().enumerate() {
            let from = lookup(&b.from)?;
            let to = lookup(&b.to)?;
            if from == to {
                return Err(GridError::SelfLoop {
                    index,
                    node: b.from,
                });
            }
            check_shape(|| format!("branch {}-{}", b.from, b.to), &b.impedance, phases)?;
            resolved.push(ResolvedBranch {
                from,
                to,
                impedance: b.impedance,
            });
        }
        let mut resolved_shunts = Vec::with_capacity(shunts.len());
        for s in shunts {
            let at = lookup(&s.node)?;
            check_shape(|| format!("shunt at {}", s.node), &s.admittance, phases)?;
            resolved_shunts.push((at, s.admittance));
        }
        Ok(Self {
            phases,
            nodes,
            position,
            branches: resolved,
            shunts: resolved_shunts,
            base,
        })
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of (node, phase) terminals.
    pub fn dim(&self) -> usize {
        self.nodes.len() * self.phases
    }

    pub fn base(&self) -> PerUnitBase {
        self.base
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn nodes_with_role(&self, role: NodeRole) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.role == role)
    }

    pub fn count_role(&self, role: NodeRole) -> usize {
        self.nodes_with_role(role).count()
    }

    pub fn branches(&self) -> impl Iterator<Item = Branch> + '_ {
        self.branches.iter().map(|b| Branch {
            from: self.nodes[b.from].id.clone(),
            to: self.nodes[b.to].id.clone(),
            impedance: b.impedance.clone(),
        })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn shunts(&self) -> impl Iterator<Item = Shunt> + '_ {
        self.shunts.iter().map(|(n, y)| Shunt {
            node: self.nodes[*n].id.clone(),
            admittance: y.clone(),
        })
    }

    /// Flat index of `phase` at node position `node`.
    pub fn flat_index(&self, node: usize, phase: usize) -> usize {
        node * self.phases + phase
    }

    /// Number of weakly connected components of the branch graph.
    pub fn component_count(&self) -> usize {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut components = n;
        for b in &self.branches {
            let (a, c) = (find(&mut parent, b.from), find(&mut parent, b.to));
            if a != c {
                parent[a] = c;
                components -= 1;
            }
        }
        components
    }

    /// Per-branch phase currents `Y_ℓ (V_from − V_to)` for a full voltage vector.
    pub fn branch_currents(&self, v: &[Complex64]) -> Result<Vec<Vec<Complex64>>, GridError> {
        if v.len() != self.dim() {
            return Err(GridError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let p = self.phases;
        self.branches
            .iter()
            .map(|b| {
                let dv: Vec<Complex64> = (0..p)
                    .map(|k| v[b.from * p + k] - v[b.to * p + k])
                    .collect();
                let lu = LuFactors::factor(&b.impedance).map_err(|_| {
                    GridError::SingularBranchImpedance {
                        from: self.nodes[b.from].id.clone(),
                        to: self.nodes[b.to].id.clone(),
                    }
                })?;
                Ok(lu.solve_vec(&dv).expect("dimension checked"))
            })
            .collect()
    }

    /// Complex power absorbed by branch series impedances, `Σ I_ℓᴴ Z_ℓ I_ℓ`.
    pub fn branch_losses(&self, v: &[Complex64]) -> Result<Complex64, GridError> {
        let currents = self.branch_currents(v)?;
        let mut total = Complex64::new(0.0, 0.0);
        for (b, i) in self.branches.iter().zip(&currents) {
            let zi = b.impedance.matvec(i).expect("shape checked");
            total += i.iter().zip(&zi).map(|(a, z)| a.conj() * z).sum::<Complex64>();
        }
        Ok(total)
    }

    /// Complex power absorbed by shunts, `Σ V_tᵀ conj(Y_t V_t)`.
    pub fn shunt_losses(&self, v: &[Complex64]) -> Result<Complex64, GridError> {
        if v.len() != self.dim() {
            return Err(GridError::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let p = self.phases;
        let mut total = Complex64::new(0.0, 0.0);
        for (n, y) in &self.shunts {
            let vn = &v[n * p..(n + 1) * p];
            let i = y.matvec(vn).expect("shape checked");
            total += vn.iter().zip(&i).map(|(a, b)| a * b.conj()).sum::<Complex64>();
        }
        Ok(total)
    }
}

/// Assembles `Y = (A_B ⊗ I)ᵀ · Y_L · (A_B ⊗ I) + Y_T`.
///
/// The incidence product is accumulated branch by branch: each `Y_ℓ` lands
/// on the two diagonal blocks of its terminals and, negated, on the two
/// off-diagonal blocks.
pub fn build_admittance(grid: &GridModel) -> Result<ComplexDense, GridError> {
    let components = grid.component_count();
    if components > 1 {
        return Err(GridError::DisconnectedGraph { components });
    }
    let p = grid.phases;
    let mut y = ComplexDense::zeros(grid.dim(), grid.dim());
    for b in &grid.branches {
        let deviation = b.impedance.asymmetry();
        if deviation > SYMMETRY_TOLERANCE * b.impedance.max_abs().max(1.0) {
            return Err(GridError::NonSymmetricParameter {
                what: format!(
                    "impedance of branch {}-{}",
                    grid.nodes[b.from].id, grid.nodes[b.to].id
                ),
                deviation,
            });
        }
        let y_branch = LuFactors::factor(&b.impedance)
            .and_then(|lu| lu.solve(&ComplexDense::identity(p)))
            .map_err(|_| GridError::SingularBranchImpedance {
                from: grid.nodes[b.from].id.clone(),
                to: grid.nodes[b.to].id.clone(),
            })?;
        let neg = y_branch.scale(Complex64::new(-1.0, 0.0));
        y.add_block(b.from * p, b.from * p, &y_branch);
        y.add_block(b.to * p, b.to * p, &y_branch);
        y.add_block(b.from * p, b.to * p, &neg);
        y.add_block(b.to * p, b.from * p, &neg);
    }
    for (n, ys) in &grid.shunts {
        let deviation = ys.asymmetry();
        if deviation > SYMMETRY_TOLERANCE * ys.max_abs().max(1.0) {
            return Err(GridError::NonSymmetricParameter {
                what: format!("shunt admittance at {}", grid.nodes[*n].id),
                deviation,
            });
        }
        y.add_block(n * p, n * p, ys);
    }
    Ok(y)
}

/// Injected powers `S = V ∘ conj(Y V)`.
pub fn injected_power(y: &ComplexDense, v: &[Complex64]) -> Result<Vec<Complex64>, GridError> {
    if y.cols() != v.len() {
        return Err(GridError::DimensionMismatch {
            expected: y.cols(),
            got: v.len(),
        });
    }
    let i = y.matvec(v).expect("dimension checked");
    Ok(v.iter().zip(&i).map(|(a, b)| a * b.conj()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Real parts of all branch impedances positive definite and the branch
    /// graph connected, i.e. zero-injection nodes may be Kron-eliminated.
    pub kron_eligible: bool,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Smallest eigenvalue of the symmetric part of a real matrix, relative to its scale.
fn min_eigenvalue(m: &RealDense) -> (f64, f64) {
    let n = m.rows();
    let sym = nalgebra::DMatrix::from_fn(n, n, |r, c| 0.5 * (m[(r, c)] + m[(c, r)]));
    let scale = sym.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    (min, scale)
}

fn is_zero(m: &ComplexDense) -> bool {
    m.as_slice().iter().all(|v| *v == Complex64::new(0.0, 0.0))
}

/// Checks the structural and electrical preconditions of the model and of
/// Kron reduction. Failures are reported, never raised.
pub fn validate_hypotheses(grid: &GridModel) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, failures: Vec<String>, ok_detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed: failures.is_empty(),
            detail: if failures.is_empty() {
                ok_detail
            } else {
                failures.join("; ")
            },
        });
    };
    let label = |b: &ResolvedBranch| format!("{}-{}", grid.nodes[b.from].id, grid.nodes[b.to].id);
    let nb = grid.branches.len();

    let has_slack = grid.count_role(NodeRole::Slack) > 0;
    push(
        "node_roles",
        if has_slack {
            vec![]
        } else {
            vec!["no slack node".into()]
        },
        format!(
            "{} slack, {} resource, {} zero-injection",
            grid.count_role(NodeRole::Slack),
            grid.count_role(NodeRole::Resource),
            grid.count_role(NodeRole::ZeroInjection)
        ),
    );

    let asym: Vec<String> = grid
        .branches
        .iter()
        .filter_map(|b| {
            let d = b.impedance.asymmetry();
            (d > SYMMETRY_TOLERANCE * b.impedance.max_abs().max(1.0))
                .then(|| format!("{} deviates by {d:.2e}", label(b)))
        })
        .collect();
    push("branch_symmetry", asym, format!("{nb} branches symmetric"));

    let singular: Vec<String> = grid
        .branches
        .iter()
        .filter(|b| LuFactors::factor(&b.impedance).is_err())
        .map(|b| format!("{} singular", label(b)))
        .collect();
    push("branch_invertibility", singular, format!("{nb} branches invertible"));

    let mut not_psd = Vec::new();
    let mut not_pd = Vec::new();
    for b in &grid.branches {
        let (min, scale) = min_eigenvalue(&b.impedance.real_part());
        let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
        if min < -tol {
            not_psd.push(format!("{} has eigenvalue {min:.3e}", label(b)));
        }
        if min <= tol {
            not_pd.push(format!("{} has eigenvalue {min:.3e}", label(b)));
        }
    }
    let branch_pd = not_pd.is_empty();
    push(
        "branch_resistance_psd",
        not_psd,
        "Re{Z} positive semidefinite".into(),
    );
    push(
        "branch_resistance_pd",
        not_pd,
        "Re{Z} positive definite".into(),
    );

    let mut shunt_asym = Vec::new();
    let mut shunt_singular = Vec::new();
    let mut shunt_not_psd = Vec::new();
    for (n, y) in grid.shunts.iter().filter(|(_, y)| !is_zero(y)) {
        let id = &grid.nodes[*n].id;
        let d = y.asymmetry();
        if d > SYMMETRY_TOLERANCE * y.max_abs().max(1.0) {
            shunt_asym.push(format!("{id} deviates by {d:.2e}"));
        }
        if LuFactors::factor(y).is_err() {
            shunt_singular.push(format!("{id} singular"));
        }
        let (min, scale) = min_eigenvalue(&y.real_part());
        if min < -1e-12 * scale.max(f64::MIN_POSITIVE) {
            shunt_not_psd.push(format!("{id} has eigenvalue {min:.3e}"));
        }
    }
    let ns = grid.shunts.len();
    push("shunt_symmetry", shunt_asym, format!("{ns} shunts checked"));
    push("shunt_invertibility", shunt_singular, format!("{ns} shunts checked"));
    push("shunt_conductance_psd", shunt_not_psd, format!("{ns} shunts checked"));

    let components = grid.component_count();
    let connected = components == 1;
    push(
        "weak_connectivity",
        if connected {
            vec![]
        } else {
            vec![format!("{components} components")]
        },
        "branch graph weakly connected".into(),
    );

    ValidationReport {
        kron_eligible: connected && branch_pd,
        checks,
    }
}

/// Builds a `|P|×|P|` complex matrix from nested `[re, im]` pairs.
pub fn compound_from_pairs(rows: &[Vec<[f64; 2]>]) -> Result<ComplexDense, crate::linalg::LinalgError> {
    let rows: Vec<Vec<Complex64>> = rows
        .iter()
        .map(|r| r.iter().map(|&[re, im]| Complex64::new(re, im)).collect())
        .collect();
    Dense::from_rows(&rows)
}
