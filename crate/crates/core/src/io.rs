//! File formats: grid description and line configurations (JSON), device
//! models (JSON) and loading profiles (CSV).
//!
//! Physical units appear only here. Line impedances are given in Ω/km and
//! line shunt admittances in S/km; both are converted to per unit with the
//! grid's base. Configured lines use the π model, with half of the line's
//! shunt admittance placed at each end.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{Coefficients, DeviceError, DeviceSet, LoadingProfile, PolynomialModel, PolynomialPhase, TheveninEquivalent};
use crate::grid::{Branch, GridError, GridModel, Node, PerUnitBase, Shunt};
use crate::linalg::ComplexDense;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
    #[error("unknown line configuration `{0}`")]
    UnknownConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

impl IoError {
    fn format(msg: impl Into<String>) -> Self {
        IoError::Format(msg.into())
    }
}

pub fn read_file(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Complex matrix as rows of `[re, im]` pairs.
pub type ComplexRows = Vec<Vec<[f64; 2]>>;

pub fn matrix_from_pairs(rows: &ComplexRows) -> Result<ComplexDense, IoError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(IoError::format(format!("matrix is not square ({n} rows)")));
    }
    let data = rows.iter().flatten().map(|&[re, im]| Complex64::new(re, im)).collect();
    ComplexDense::from_row_major(n, n, data).map_err(|e| IoError::format(e.to_string()))
}

pub fn matrix_to_pairs(m: &ComplexDense) -> ComplexRows {
    (0..m.rows()).map(|r| m.row(r).iter().map(|z| [z.re, z.im]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub z_ohm_per_km: ComplexRows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_shunt_s_per_km: Option<ComplexRows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub configs: BTreeMap<String, LineConfig>,
}

pub fn parse_line_configs(text: &str) -> Result<LineConfigFile, IoError> {
    let file: LineConfigFile = serde_json::from_str(text)?;
    for (code, cfg) in &file.configs {
        let z = matrix_from_pairs(&cfg.z_ohm_per_km)?;
        if let Some(y) = &cfg.y_shunt_s_per_km {
            let y = matrix_from_pairs(y)?;
            if y.rows() != z.rows() {
                return Err(IoError::format(format!("config `{code}`: shunt and impedance sizes differ")));
            }
        }
    }
    Ok(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerUnitSpec {
    #[serde(rename = "Pb_W")]
    pub pb_w: f64,
    #[serde(rename = "Vb_V")]
    pub vb_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_km: Option<f64>,
    /// Total series impedance in Ω.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_ohm: Option<ComplexRows>,
    /// Total series impedance in per unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_pu: Option<ComplexRows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShuntSpec {
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_siemens: Option<ComplexRows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_pu: Option<ComplexRows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub per_unit: PerUnitSpec,
    pub phases: usize,
    pub nodes: Vec<Node>,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub shunts: Vec<ShuntSpec>,
}

fn exactly_one<T>(what: &str, options: [(&str, Option<T>); 2]) -> Result<T, IoError> {
    let [(a, x), (b, y)] = options;
    match (x, y) {
        (Some(v), None) | (None, Some(v)) => Ok(v),
        _ => Err(IoError::format(format!("{what}: give exactly one of `{a}` and `{b}`"))),
    }
}

impl GridFile {
    /// Resolves configured lines and units into a per-unit grid model.
    pub fn build(&self, configs: Option<&LineConfigFile>) -> Result<GridModel, IoError> {
        let base = PerUnitBase::new(self.per_unit.pb_w, self.per_unit.vb_v)?;
        let zb = base.impedance_ohm();
        let mut branches = Vec::with_capacity(self.branches.len());
        let mut charging: HashMap<String, ComplexDense> = HashMap::new();
        for b in &self.branches {
            let what = format!("branch {}-{}", b.from, b.to);
            let impedance = match &b.config_code {
                Some(code) => {
                    if b.z_ohm.is_some() || b.z_pu.is_some() {
                        return Err(IoError::format(format!("{what}: `config_code` excludes explicit impedances")));
                    }
                    let cfg = configs
                        .and_then(|c| c.configs.get(code))
                        .ok_or_else(|| IoError::UnknownConfig(code.clone()))?;
                    let len = b
                        .length_km
                        .filter(|l| l.is_finite() && *l > 0.0)
                        .ok_or_else(|| IoError::format(format!("{what}: configured lines need a positive `length_km`")))?;
                    if let Some(y) = &cfg.y_shunt_s_per_km {
                        let half = matrix_from_pairs(y)?.scale(Complex64::new(0.5 * len * zb, 0.0));
                        for node in [&b.from, &b.to] {
                            match charging.get_mut(node) {
                                Some(acc) => *acc = acc.add(&half).map_err(|e| IoError::format(format!("{what}: {e}")))?,
                                None => {
                                    charging.insert(node.clone(), half.clone());
                                }
                            }
                        }
                    }
                    matrix_from_pairs(&cfg.z_ohm_per_km)?.scale(Complex64::new(len / zb, 0.0))
                }
                None => {
                    let z = exactly_one(&what, [("z_ohm", b.z_ohm.as_ref()), ("z_pu", b.z_pu.as_ref())])?;
                    let m = matrix_from_pairs(z)?;
                    if b.z_ohm.is_some() {
                        m.scale(Complex64::new(1.0 / zb, 0.0))
                    } else {
                        m
                    }
                }
            };
            branches.push(Branch {
                from: b.from.clone(),
                to: b.to.clone(),
                impedance,
            });
        }
        let mut shunts = Vec::with_capacity(self.shunts.len() + charging.len());
        for s in &self.shunts {
            let what = format!("shunt at {}", s.node);
            let y = exactly_one(&what, [("y_siemens", s.y_siemens.as_ref()), ("y_pu", s.y_pu.as_ref())])?;
            let m = matrix_from_pairs(y)?;
            let admittance = if s.y_siemens.is_some() {
                m.scale(Complex64::new(zb, 0.0))
            } else {
                m
            };
            shunts.push(Shunt {
                node: s.node.clone(),
                admittance,
            });
        }
        // deterministic order for the line-charging shunts
        let mut charging: Vec<_> = charging.into_iter().collect();
        charging.sort_by(|a, b| a.0.cmp(&b.0));
        shunts.extend(charging.into_iter().map(|(node, admittance)| Shunt { node, admittance }));
        Ok(GridModel::new(self.phases, self.nodes.clone(), branches, shunts, base)?)
    }
}

pub fn parse_grid_file(text: &str) -> Result<GridFile, IoError> {
    Ok(serde_json::from_str(text)?)
}

pub fn parse_grid(text: &str, configs: Option<&LineConfigFile>) -> Result<GridModel, IoError> {
    parse_grid_file(text)?.build(configs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarPhasor {
    pub magnitude: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheveninSpec {
    pub node: String,
    pub v_source: Vec<PolarPhasor>,
    pub z_pu: ComplexRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    #[serde(rename = "P0")]
    pub p0: f64,
    #[serde(rename = "Q0")]
    pub q0: f64,
    #[serde(rename = "V0")]
    pub v0: f64,
    pub re: CoefficientSpec,
    pub im: CoefficientSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialSpec {
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub phases: Vec<PhaseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub thevenin: Vec<TheveninSpec>,
    pub polynomial: Vec<PolynomialSpec>,
}

fn coefficients(c: CoefficientSpec) -> Coefficients {
    Coefficients {
        alpha: c.alpha,
        beta: c.beta,
        gamma: c.gamma,
    }
}

impl DeviceFile {
    pub fn build(&self) -> Result<DeviceSet, IoError> {
        let mut thevenin = Vec::with_capacity(self.thevenin.len());
        for t in &self.thevenin {
            let source = t
                .v_source
                .iter()
                .map(|p| Complex64::from_polar(p.magnitude, p.angle_deg.to_radians()))
                .collect();
            thevenin.push(TheveninEquivalent::new(t.node.clone(), source, matrix_from_pairs(&t.z_pu)?)?);
        }
        let mut polynomial = Vec::with_capacity(self.polynomial.len());
        for p in &self.polynomial {
            let phases = p
                .phases
                .iter()
                .map(|ph| PolynomialPhase {
                    p0: ph.p0,
                    q0: ph.q0,
                    v0: ph.v0,
                    real: coefficients(ph.re),
                    imag: coefficients(ph.im),
                })
                .collect();
            polynomial.push(PolynomialModel::new(p.node.clone(), phases)?);
        }
        Ok(DeviceSet { thevenin, polynomial })
    }
}

pub fn parse_devices_file(text: &str) -> Result<DeviceFile, IoError> {
    Ok(serde_json::from_str(text)?)
}

pub fn parse_devices(text: &str) -> Result<DeviceSet, IoError> {
    parse_devices_file(text)?.build()
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    step: usize,
    node: String,
    lambda: f64,
}

/// Long-format CSV with header `step,node,lambda`. Every node must cover
/// steps `0..n` exactly once.
pub fn parse_profiles(text: &str) -> Result<LoadingProfile, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["step", "node", "lambda"] {
        return Err(IoError::format("profile header must be `step,node,lambda`"));
    }
    let mut cells: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: ProfileRow = row?;
        if cells.entry(row.node.clone()).or_default().insert(row.step, row.lambda).is_some() {
            return Err(IoError::format(format!("duplicate entry for `{}` at step {}", row.node, row.step)));
        }
    }
    let mut series = BTreeMap::new();
    for (node, steps) in cells {
        let values: Vec<f64> = steps.values().copied().collect();
        if steps.keys().enumerate().any(|(i, &s)| i != s) {
            return Err(IoError::format(format!("steps for `{node}` are not contiguous from 0")));
        }
        series.insert(node, values);
    }
    Ok(LoadingProfile::new(series)?)
}

pub fn write_profiles(profile: &LoadingProfile) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "node", "lambda"])?;
    for step in 0..profile.steps() {
        for (node, s) in profile.series() {
            w.write_record([step.to_string(), node.clone(), s[step].to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| IoError::format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| IoError::format(e.to_string()))
}

/// Paths of a complete model description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPaths {
    pub grid: PathBuf,
    pub devices: PathBuf,
    pub line_configs: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub grid: GridModel,
    pub devices: DeviceSet,
    pub profiles: Option<LoadingProfile>,
}

pub fn load_model(paths: &ModelPaths) -> Result<LoadedModel, IoError> {
    let configs = match &paths.line_configs {
        Some(p) => Some(parse_line_configs(&read_file(p)?).map_err(|e| with_path(p, e))?),
        None => None,
    };
    let grid = parse_grid(&read_file(&paths.grid)?, configs.as_ref()).map_err(|e| with_path(&paths.grid, e))?;
    let devices = parse_devices(&read_file(&paths.devices)?).map_err(|e| with_path(&paths.devices, e))?;
    let profiles = match &paths.profiles {
        Some(p) => Some(parse_profiles(&read_file(p)?).map_err(|e| with_path(p, e))?),
        None => None,
    };
    Ok(LoadedModel { grid, devices, profiles })
}

fn with_path(path: &Path, e: IoError) -> IoError {
    match e {
        e @ IoError::File { .. } => e,
        other => IoError::Format(format!("{}: {other}", path.display())),
    }
}
