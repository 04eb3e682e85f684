//! The 116-node benchmark system: five meshed feeders with one slack node,
//! fifteen resource nodes and one hundred zero-injection nodes.
//!
//! The topology, line assignment and device parameters live in data files
//! under `data/`; this module checks them against [`TestSystemSpec`] and
//! assembles the model.

use std::path::{Path, PathBuf};

use kronflow::devices::{DeviceSet, LoadingProfile};
use kronflow::grid::{validate_hypotheses, GridModel, NodeRole, PerUnitBase};
use kronflow::io::{
    parse_devices_file, parse_grid_file, parse_line_configs, parse_profiles, read_file, DeviceFile, GridFile,
    IoError, LineConfigFile,
};
use kronflow::linalg::ComplexDense;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TestSystemError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("line configuration `{0}` is not allowed or not defined")]
    MissingConfig(String),
    #[error("{what}: expected {expected}, found {got}")]
    CountMismatch { what: String, expected: usize, got: usize },
    #[error("branch {branch}: {detail}")]
    Line { branch: String, detail: String },
    #[error("per-unit base {got:?} differs from {expected:?}")]
    BaseMismatch { expected: PerUnitBase, got: PerUnitBase },
    #[error("Thévenin impedance at {node} deviates by {deviation:.3e} pu from S_sc and R/X")]
    Thevenin { node: String, deviation: f64 },
    #[error("grid violates modeling hypotheses: {0}")]
    Hypotheses(String),
}

/// Structural facts of the benchmark system that the data files must match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSystemSpec {
    pub phases: usize,
    pub slack: usize,
    /// Resource-node groups by id prefix (generators, loads, compensators).
    pub resource_groups: Vec<(String, usize)>,
    pub zero_injection: usize,
    pub line_length_km: f64,
    pub config_codes: Vec<String>,
    /// Short-circuit power at the slack node, VA.
    pub s_sc_va: f64,
    pub r_over_x: f64,
    pub base: PerUnitBase,
}

impl Default for TestSystemSpec {
    fn default() -> Self {
        Self {
            phases: 3,
            slack: 1,
            resource_groups: vec![("G".into(), 5), ("L".into(), 5), ("C".into(), 5)],
            zero_injection: 100,
            line_length_km: 5.0,
            config_codes: vec!["300".into(), "301".into()],
            s_sc_va: 100e6,
            r_over_x: 0.1,
            base: PerUnitBase {
                power_w: 10e6,
                voltage_ll_v: 24.9e3,
            },
        }
    }
}

impl TestSystemSpec {
    pub fn resources(&self) -> usize {
        self.resource_groups.iter().map(|(_, n)| n).sum()
    }

    pub fn nodes(&self) -> usize {
        self.slack + self.resources() + self.zero_injection
    }

    /// `Z_TE = |Z|·(r + jx)/√(r² + x²)·I` with `|Z| = Pb/S_sc` in per unit.
    pub fn thevenin_impedance(&self) -> ComplexDense {
        let mag = self.base.power_w / self.s_sc_va;
        let k = self.r_over_x;
        let x = mag / (1.0 + k * k).sqrt();
        let z = Complex64::new(k * x, x);
        ComplexDense::diagonal(&vec![z; self.phases])
    }
}

#[derive(Debug, Clone)]
pub struct TestSystem {
    pub grid: GridModel,
    pub devices: DeviceSet,
    pub profiles: Option<LoadingProfile>,
}

const TE_TOLERANCE: f64 = 1e-6;

/// Checks the data files against `spec` and builds the model.
pub fn build_test_system(
    spec: &TestSystemSpec,
    grid_file: &GridFile,
    device_file: &DeviceFile,
    configs: &LineConfigFile,
) -> Result<(GridModel, DeviceSet), TestSystemError> {
    let base = PerUnitBase::new(grid_file.per_unit.pb_w, grid_file.per_unit.vb_v).map_err(IoError::from)?;
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    if !same(base.power_w, spec.base.power_w) || !same(base.voltage_ll_v, spec.base.voltage_ll_v) {
        return Err(TestSystemError::BaseMismatch {
            expected: spec.base,
            got: base,
        });
    }
    count("phases", spec.phases, grid_file.phases)?;
    let role_count = |role| grid_file.nodes.iter().filter(|n| n.role == role).count();
    count("slack nodes", spec.slack, role_count(NodeRole::Slack))?;
    count("resource nodes", spec.resources(), role_count(NodeRole::Resource))?;
    count("zero-injection nodes", spec.zero_injection, role_count(NodeRole::ZeroInjection))?;
    for (prefix, n) in &spec.resource_groups {
        let got = grid_file
            .nodes
            .iter()
            .filter(|node| node.role == NodeRole::Resource && node.id.starts_with(prefix.as_str()))
            .count();
        count(&format!("resource nodes `{prefix}*`"), *n, got)?;
    }

    for b in &grid_file.branches {
        let branch = format!("{}-{}", b.from, b.to);
        let code = b.config_code.as_ref().ok_or_else(|| TestSystemError::Line {
            branch: branch.clone(),
            detail: "no configuration code".into(),
        })?;
        if !spec.config_codes.contains(code) || !configs.configs.contains_key(code) {
            return Err(TestSystemError::MissingConfig(code.clone()));
        }
        match b.length_km {
            Some(l) if (l - spec.line_length_km).abs() <= 1e-9 => {}
            other => {
                return Err(TestSystemError::Line {
                    branch,
                    detail: format!("length {other:?} km, expected {} km", spec.line_length_km),
                })
            }
        }
    }

    let grid = grid_file.build(Some(configs))?;
    let report = validate_hypotheses(&grid);
    if !report.all_passed() {
        let reasons: Vec<String> = report.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
        return Err(TestSystemError::Hypotheses(reasons.join("; ")));
    }

    let devices = device_file.build()?;
    let z_te = spec.thevenin_impedance();
    for te in &devices.thevenin {
        let deviation = te.impedance().max_abs_diff(&z_te);
        if !(deviation <= TE_TOLERANCE) {
            return Err(TestSystemError::Thevenin {
                node: te.node().to_string(),
                deviation,
            });
        }
    }
    Ok((grid, devices))
}

fn count(what: &str, expected: usize, got: usize) -> Result<(), TestSystemError> {
    if expected == got {
        Ok(())
    } else {
        Err(TestSystemError::CountMismatch {
            what: what.into(),
            expected,
            got,
        })
    }
}

/// File locations of a test-system description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSystemFiles {
    pub grid: PathBuf,
    pub devices: PathBuf,
    pub line_configs: PathBuf,
    pub profiles: Option<PathBuf>,
}

impl TestSystemFiles {
    /// Layout of the `data/` directory shipped with the repository.
    pub fn in_dir(data: &Path) -> Self {
        Self {
            grid: data.join("test_system/grid.json"),
            devices: data.join("test_system/devices.json"),
            line_configs: data.join("line_configs.json"),
            profiles: Some(data.join("test_system/profiles.csv")),
        }
    }

    pub fn bundled() -> Self {
        Self::in_dir(&bundled_data_dir())
    }
}

/// `data/` at the repository root.
pub fn bundled_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn load_test_system(spec: &TestSystemSpec, files: &TestSystemFiles) -> Result<TestSystem, TestSystemError> {
    let at = |p: &Path, e: IoError| match e {
        e @ IoError::File { .. } => e,
        e => IoError::Format(format!("{}: {e}", p.display())),
    };
    let grid_file = parse_grid_file(&read_file(&files.grid)?).map_err(|e| at(&files.grid, e))?;
    let device_file = parse_devices_file(&read_file(&files.devices)?).map_err(|e| at(&files.devices, e))?;
    let configs = parse_line_configs(&read_file(&files.line_configs)?).map_err(|e| at(&files.line_configs, e))?;
    let (grid, devices) = build_test_system(spec, &grid_file, &device_file, &configs)?;
    let profiles = match &files.profiles {
        Some(p) => Some(parse_profiles(&read_file(p)?).map_err(|e| at(p, e))?),
        None => None,
    };
    Ok(TestSystem {
        grid,
        devices,
        profiles,
    })
}
