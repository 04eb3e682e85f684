//! Analysis view of a grid: the (possibly Kron-reduced) admittance matrix
//! together with the devices bound to the retained nodes.

use num_complex::Complex64;
use thiserror::Error;

use crate::devices::{DeviceBinding, DeviceError, DeviceSet};
use crate::grid::{build_admittance, GridError, GridModel, Node, NodeRole};
use crate::kron::ReductionStep;
use crate::linalg::ComplexDense;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("reduction step splits the phases of node position {0}")]
    PartialPhaseElimination(usize),
    #[error("reduction step eliminates {role} node `{node}`")]
    EliminatesActiveNode { role: NodeRole, node: String },
    #[error("reduction step has dimension {step}, grid has {grid}")]
    StepMismatch { step: usize, grid: usize },
    #[error("admittance matrix is {rows}x{cols}, expected {expected}x{expected}")]
    AdmittanceShape { rows: usize, cols: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct Network {
    phases: usize,
    nodes: Vec<Node>,
    grid_positions: Vec<usize>,
    step_index: usize,
    y: ComplexDense,
    /// `Y` with every Thévenin admittance added on its slack block.
    y_aug: ComplexDense,
    /// `Y_TE V_TE` on slack blocks, zero elsewhere.
    source_current: Vec<Complex64>,
    devices: DeviceBinding,
}

impl Network {
    /// Unreduced network.
    pub fn full(grid: &GridModel, devices: &DeviceSet) -> Result<Self, NetworkError> {
        let y = build_admittance(grid)?;
        let positions = (0..grid.node_count()).collect();
        Self::from_parts(grid.phases(), grid.nodes().to_vec(), positions, 0, y, devices)
    }

    /// Network retained after a Kron reduction step of `grid`.
    pub fn reduced(grid: &GridModel, devices: &DeviceSet, step: &ReductionStep) -> Result<Self, NetworkError> {
        let p = grid.phases();
        let total = step.retained.len() + step.eliminated.len();
        if total != grid.dim() {
            return Err(NetworkError::StepMismatch {
                step: total,
                grid: grid.dim(),
            });
        }
        let flat = step.retained.as_slice();
        let mut positions = Vec::with_capacity(flat.len() / p.max(1));
        for chunk in flat.chunks(p) {
            let node = chunk[0] / p;
            if chunk.len() != p || chunk.iter().enumerate().any(|(k, &i)| i != node * p + k) {
                return Err(NetworkError::PartialPhaseElimination(node));
            }
            positions.push(node);
        }
        for i in step.eliminated.as_slice().iter().step_by(p) {
            let n = &grid.nodes()[i / p];
            if n.role != NodeRole::ZeroInjection {
                return Err(NetworkError::EliminatesActiveNode {
                    role: n.role,
                    node: n.id.clone(),
                });
            }
        }
        let nodes = positions.iter().map(|&i| grid.nodes()[i].clone()).collect();
        Self::from_parts(p, nodes, positions, step.step_index, step.y_reduced.clone(), devices)
    }

    pub fn from_parts(
        phases: usize,
        nodes: Vec<Node>,
        grid_positions: Vec<usize>,
        step_index: usize,
        y: ComplexDense,
        devices: &DeviceSet,
    ) -> Result<Self, NetworkError> {
        let dim = nodes.len() * phases;
        if y.rows() != dim || y.cols() != dim {
            return Err(NetworkError::AdmittanceShape {
                rows: y.rows(),
                cols: y.cols(),
                expected: dim,
            });
        }
        let devices = DeviceBinding::bind(devices, &nodes, phases)?;
        let mut y_aug = y.clone();
        let mut source_current = vec![Complex64::new(0.0, 0.0); dim];
        for (pos, te) in devices.slack() {
            y_aug.add_block(pos * phases, pos * phases, te.admittance());
            source_current[pos * phases..(pos + 1) * phases].copy_from_slice(&te.source_current());
        }
        Ok(Self {
            phases,
            nodes,
            grid_positions,
            step_index,
            y,
            y_aug,
            source_current,
            devices,
        })
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    /// Number of complex voltage unknowns.
    pub fn dim(&self) -> usize {
        self.nodes.len() * self.phases
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Position of each retained node in the original grid.
    pub fn grid_positions(&self) -> &[usize] {
        &self.grid_positions
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn admittance(&self) -> &ComplexDense {
        &self.y
    }

    pub(crate) fn augmented_admittance(&self) -> &ComplexDense {
        &self.y_aug
    }

    pub(crate) fn source_current(&self) -> &[Complex64] {
        &self.source_current
    }

    pub fn devices(&self) -> &DeviceBinding {
        &self.devices
    }

    /// Flat indices of nodes with the given role.
    pub fn flat_indices(&self, role: NodeRole) -> Vec<usize> {
        let p = self.phases;
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == role)
            .flat_map(|(i, _)| (0..p).map(move |k| i * p + k))
            .collect()
    }

    pub fn resource_ids(&self) -> impl Iterator<Item = &str> {
        self.devices.resource().iter().map(|(_, m)| m.node())
    }

    /// Loading vector with `value` for every resource node.
    pub fn uniform_loading(&self, value: f64) -> Vec<f64> {
        vec![value; self.devices.loading_len()]
    }
}
