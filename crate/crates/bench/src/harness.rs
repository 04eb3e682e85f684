//! Benchmark runner: for every step of a reduction schedule it solves the
//! power flow, the state estimation and the continuation problem, records
//! condition numbers and counts, times repeated runs and checks each result
//! against the unreduced one.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use kronflow::devices::{DeviceSet, LoadingProfile};
use kronflow::estimation::{
    build_measurement_model, emulate_pmu, rmse, wls_solve, wls_solve_with, PmuSpec, WlsOptions,
};
use kronflow::grid::GridModel;
use kronflow::kron::{recover_interior, ReductionSchedule, ReductionStep};
use kronflow::network::Network;
use kronflow::powerflow::{solve_flat, NrmOptions};
use kronflow::vsa::{run_continuation, ContinuationOptions, Trajectory};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::report::{BenchmarkReport, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Zero-injection nodes eliminated per schedule step.
    pub batch: usize,
    /// Profile time step that provides the base loading `λ0`.
    pub loading_step: usize,
    /// Timed runs kept per cell.
    pub samples: usize,
    /// Timed runs discarded before the kept ones.
    pub warmup: usize,
    pub seed: u64,
    pub nrm: NrmOptions,
    pub pmu: PmuSpec,
    pub continuation: ContinuationOptions,
    /// Resource nodes whose loading grows along the VSA trajectory, by id prefix.
    pub vsa_node_prefix: String,
    /// Bound on voltage deviations from the unreduced solution, pu.
    pub consistency_tolerance: f64,
    /// Bound on noiseless state-estimation error, pu.
    pub recovery_tolerance: f64,
    /// Correctness-only run: no timing, steps evaluated concurrently.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 10,
            loading_step: 12,
            samples: 30,
            warmup: 3,
            seed: 20190701,
            nrm: NrmOptions::default(),
            pmu: PmuSpec::default(),
            continuation: ContinuationOptions::default(),
            vsa_node_prefix: "L".into(),
            consistency_tolerance: 1e-8,
            recovery_tolerance: 1e-9,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    Pfs,
    Se,
    Vsa,
}

impl Analysis {
    pub const ALL: [Analysis; 3] = [Analysis::Pfs, Analysis::Se, Analysis::Vsa];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Pfs => "pfs",
            Analysis::Se => "se",
            Analysis::Vsa => "vsa",
        }
    }
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup: usize,
    pub samples_ns: Vec<u64>,
    pub median_ns: f64,
}

impl Timing {
    pub fn from_samples(warmup: usize, samples_ns: Vec<u64>) -> Self {
        let median_ns = median(&samples_ns);
        Self {
            warmup,
            samples_ns,
            median_ns,
        }
    }
}

pub fn median(samples: &[u64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m] as f64
    } else {
        (s[m - 1] as f64 + s[m] as f64) / 2.0
    }
}

/// One analysis at one schedule step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub analysis: Analysis,
    /// Finite scalar results, keyed by metric name.
    pub metrics: BTreeMap<String, f64>,
    pub timing: Option<Timing>,
    /// SHA-256 of the solution vector (little-endian f64).
    pub checksum: Option<String>,
    /// Outcome of the embedded consistency check.
    pub consistent: bool,
    pub error: Option<String>,
}

impl Cell {
    fn new(analysis: Analysis) -> Self {
        Self {
            analysis,
            metrics: BTreeMap::new(),
            timing: None,
            checksum: None,
            consistent: false,
            error: None,
        }
    }

    fn failed(analysis: Analysis, error: impl fmt::Display) -> Self {
        Self {
            error: Some(error.to_string()),
            ..Self::new(analysis)
        }
    }

    fn metric(&mut self, name: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.to_string(), value);
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn valid(&self) -> bool {
        self.error.is_none() && self.consistent
    }

    pub fn median_ns(&self) -> Option<f64> {
        self.timing.as_ref().map(|t| t.median_ns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub nodes: usize,
    pub dim: usize,
    pub eliminated_nodes: usize,
    pub cells: Vec<Cell>,
}

impl StepReport {
    pub fn cell(&self, analysis: Analysis) -> Option<&Cell> {
        self.cells.iter().find(|c| c.analysis == analysis)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("the schedule has no unreduced step 0")]
    NoBaseStep,
    #[error("loading profile: {0}")]
    Loading(String),
    #[error("VSA trajectory: {0}")]
    Trajectory(String),
}

/// SHA-256 over the little-endian bytes of `values`.
pub fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn complex_checksum(v: &[Complex64]) -> String {
    let flat: Vec<f64> = v.iter().flat_map(|x| [x.re, x.im]).collect();
    checksum(&flat)
}

/// Repeats `f` for `warmup + samples` runs and keeps the last `samples`
/// wall times from a monotonic clock.
pub fn time_runs<E: fmt::Display>(
    warmup: usize,
    samples: usize,
    mut f: impl FnMut() -> Result<(), E>,
) -> Result<Timing, String> {
    let mut kept = Vec::with_capacity(samples);
    for i in 0..warmup + samples {
        let start = Instant::now();
        f().map_err(|e| e.to_string())?;
        let ns = start.elapsed().as_nanos() as u64;
        if i >= warmup {
            kept.push(ns);
        }
    }
    Ok(Timing::from_samples(warmup, kept))
}

struct Reference {
    voltages: Vec<Complex64>,
    lambda_max: Option<f64>,
}

struct Context<'a> {
    grid: &'a GridModel,
    devices: &'a DeviceSet,
    config: &'a BenchConfig,
    lambda0: Vec<f64>,
    direction: Vec<f64>,
}

/// Runs all analyses on every step of `schedule`.
///
/// Failures are recorded in the affected cell and do not stop the run.
pub fn run_benchmark(
    grid: &GridModel,
    devices: &DeviceSet,
    profiles: Option<&LoadingProfile>,
    schedule: &ReductionSchedule,
    config: &BenchConfig,
) -> Result<BenchmarkReport, BenchError> {
    let first = schedule.steps.first().ok_or(BenchError::NoBaseStep)?;
    if !first.eliminated.is_empty() {
        return Err(BenchError::NoBaseStep);
    }
    let started = Instant::now();
    let full = Network::reduced(grid, devices, first).map_err(|e| BenchError::Loading(e.to_string()))?;
    let lambda0 = match profiles {
        Some(p) => full
            .devices()
            .loading_at(p, config.loading_step)
            .map_err(|e| BenchError::Loading(e.to_string()))?,
        None => full.uniform_loading(1.0),
    };
    let direction: Vec<f64> = full
        .resource_ids()
        .map(|id| if id.starts_with(config.vsa_node_prefix.as_str()) { 1.0 } else { 0.0 })
        .collect();
    Trajectory::new(lambda0.clone(), direction.clone()).map_err(|e| BenchError::Trajectory(e.to_string()))?;
    let ctx = Context {
        grid,
        devices,
        config,
        lambda0,
        direction,
    };

    let (base_report, reference) = run_step(&ctx, first, None);
    let rest = &schedule.steps[1..];
    let mut steps = vec![base_report];
    if config.parallel {
        let reports: Vec<StepReport> = rest.par_iter().map(|s| run_step(&ctx, s, reference.as_ref()).0).collect();
        steps.extend(reports);
    } else {
        steps.extend(rest.iter().map(|s| run_step(&ctx, s, reference.as_ref()).0));
    }
    let summary = Summary::from_steps(&steps);
    Ok(BenchmarkReport {
        system: format!("{} nodes, {} phases", grid.node_count(), grid.phases()),
        config: config.clone(),
        steps,
        summary,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn run_step(ctx: &Context<'_>, step: &ReductionStep, reference: Option<&Reference>) -> (StepReport, Option<Reference>) {
    let nodes = step.retained.len() / ctx.grid.phases();
    let mut report = StepReport {
        step: step.step_index,
        nodes,
        dim: step.retained.len(),
        eliminated_nodes: step.eliminated.len() / ctx.grid.phases(),
        cells: Vec::with_capacity(3),
    };
    let net = match Network::reduced(ctx.grid, ctx.devices, step) {
        Ok(n) => n,
        Err(e) => {
            report.cells = Analysis::ALL.iter().map(|&a| Cell::failed(a, &e)).collect();
            return (report, None);
        }
    };
    let (pfs, truth) = power_flow_cell(ctx, &net, step, reference);
    let se = match &truth {
        Some(v) => estimation_cell(ctx, &net, v),
        None => Cell::failed(Analysis::Se, "no power-flow solution"),
    };
    let vsa = continuation_cell(ctx, &net, step.eliminated.is_empty(), reference.and_then(|r| r.lambda_max));
    let next = match (reference, truth) {
        (None, Some(voltages)) => Some(Reference {
            voltages,
            lambda_max: vsa.get("lambda_max"),
        }),
        _ => None,
    };
    report.cells = vec![pfs, se, vsa];
    (report, next)
}

fn power_flow_cell(
    ctx: &Context<'_>,
    net: &Network,
    step: &ReductionStep,
    reference: Option<&Reference>,
) -> (Cell, Option<Vec<Complex64>>) {
    let mut cell = Cell::new(Analysis::Pfs);
    let opts = NrmOptions {
        condition: true,
        ..ctx.config.nrm
    };
    let sol = match solve_flat(net, &ctx.lambda0, &opts) {
        Ok(s) => s,
        Err(e) => return (Cell::failed(Analysis::Pfs, e), None),
    };
    let v = sol.voltages();
    cell.metric("iterations", sol.iterations as f64);
    cell.metric("final_mismatch", sol.final_mismatch_inf);
    if let Some(c) = sol.jacobian_condition {
        cell.metric("jacobian_condition", c);
    }
    cell.checksum = Some(complex_checksum(&v));

    let (retained, interior) = match reference {
        None if step.eliminated.is_empty() => (0.0, 0.0),
        None => (f64::NAN, f64::NAN),
        Some(r) => {
            let retained = step
                .retained
                .iter()
                .zip(&v)
                .fold(0.0f64, |m, (i, x)| m.max((r.voltages[i] - x).norm()));
            match recover_interior(step, &v) {
                Ok(inner) => {
                    let interior = step
                        .eliminated
                        .iter()
                        .zip(&inner)
                        .fold(0.0f64, |m, (i, x)| m.max((r.voltages[i] - x).norm()));
                    (retained, interior)
                }
                Err(e) => return (Cell::failed(Analysis::Pfs, e), Some(v)),
            }
        }
    };
    cell.metric("retained_deviation", retained);
    cell.metric("interior_deviation", interior);
    let tol = ctx.config.consistency_tolerance;
    cell.consistent = retained < tol && interior < tol;

    if !ctx.config.parallel {
        let quiet = NrmOptions {
            condition: false,
            ..ctx.config.nrm
        };
        match time_runs(ctx.config.warmup, ctx.config.samples, || solve_flat(net, &ctx.lambda0, &quiet).map(|_| ())) {
            Ok(t) => cell.timing = Some(t),
            Err(e) => cell.error = Some(e),
        }
    }
    (cell, Some(v))
}

fn estimation_cell(ctx: &Context<'_>, net: &Network, truth: &[Complex64]) -> Cell {
    let run = || -> Result<Cell, String> {
        let mut cell = Cell::new(Analysis::Se);
        let base = ctx.grid.base();
        let model = build_measurement_model(net, &base, &ctx.config.pmu, truth).map_err(|e| e.to_string())?;
        let exact = wls_solve_with(&model, &WlsOptions { condition: false }).map_err(|e| e.to_string())?;
        let recovery = exact
            .voltages()
            .iter()
            .zip(truth)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        cell.metric("noiseless_error", recovery);
        cell.consistent = recovery < ctx.config.recovery_tolerance;

        let seed = ctx.config.seed ^ (net.step_index() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let y = emulate_pmu(truth, &model, &ctx.config.pmu, seed).map_err(|e| e.to_string())?;
        let noisy = model.with_measurements(y).map_err(|e| e.to_string())?;
        let est = wls_solve(&noisy).map_err(|e| e.to_string())?;
        if let Some(c) = est.gain_condition {
            cell.metric("gain_condition", c);
        }
        cell.metric("rmse", rmse(&est.voltages(), truth));
        cell.metric("residual_norm", est.residual_norm);
        cell.checksum = Some(checksum(&est.x_hat));
        if !ctx.config.parallel {
            let quiet = WlsOptions { condition: false };
            cell.timing = Some(time_runs(ctx.config.warmup, ctx.config.samples, || {
                wls_solve_with(&noisy, &quiet).map(|_| ())
            })?);
        }
        Ok(cell)
    };
    run().unwrap_or_else(|e| Cell::failed(Analysis::Se, e))
}

fn continuation_cell(ctx: &Context<'_>, net: &Network, is_base: bool, reference: Option<f64>) -> Cell {
    let run = || -> Result<Cell, String> {
        let mut cell = Cell::new(Analysis::Vsa);
        let traj = Trajectory::new(ctx.lambda0.clone(), ctx.direction.clone()).map_err(|e| e.to_string())?;
        let opts = &ctx.config.continuation;
        let res = run_continuation(net, &traj, opts, false).map_err(|e| e.to_string())?;
        cell.metric("lambda_max", res.lambda_max);
        cell.metric("continuation_steps", res.steps as f64);
        let deviation = match reference {
            Some(l) => (res.lambda_max - l).abs(),
            None if is_base => 0.0,
            None => f64::NAN,
        };
        cell.metric("lambda_deviation", deviation);
        cell.consistent = deviation <= opts.sigma;
        let mut flat = res.nose_state.to_vector();
        flat.push(res.lambda_max);
        cell.checksum = Some(checksum(&flat));
        if !ctx.config.parallel {
            cell.timing = Some(time_runs(ctx.config.warmup, ctx.config.samples, || {
                run_continuation(net, &traj, opts, false).map(|_| ())
            })?);
        }
        Ok(cell)
    };
    run().unwrap_or_else(|e| Cell::failed(Analysis::Vsa, e))
}
