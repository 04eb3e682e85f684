//! Benchmark report: summary ratios, long-format CSV, JSON and gnuplot
//! scripts that redraw the timing and conditioning figures from the CSV.

use std::path::{Path, PathBuf};

use kronflow::io::{write_file, IoError};
use serde::{Deserialize, Serialize};

use crate::harness::{Analysis, BenchConfig, Cell, StepReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub system: String,
    pub config: BenchConfig,
    pub steps: Vec<StepReport>,
    pub summary: Summary,
    pub wall_time_s: f64,
}

/// First-versus-last step comparisons. Each ratio is oriented so that a
/// value above one means the reduced model is better, except
/// `vsa_step_ratio`, which is last over first as in "steps are halved".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub jacobian_condition_ratio: Option<f64>,
    pub gain_condition_ratio: Option<f64>,
    pub pfs_time_ratio: Option<f64>,
    pub se_time_ratio: Option<f64>,
    pub vsa_time_ratio: Option<f64>,
    pub vsa_step_ratio: Option<f64>,
    pub lambda_max_spread: Option<f64>,
    pub max_consistency_deviation: Option<f64>,
    pub all_valid: bool,
}

impl Summary {
    pub fn from_steps(steps: &[StepReport]) -> Self {
        let (Some(first), Some(last)) = (steps.first(), steps.last()) else {
            return Self::default();
        };
        let metric = |s: &StepReport, a: Analysis, m: &str| s.cell(a).and_then(|c| c.get(m));
        let median = |s: &StepReport, a: Analysis| s.cell(a).and_then(Cell::median_ns);
        let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        let lambdas: Vec<f64> = steps.iter().filter_map(|s| metric(s, Analysis::Vsa, "lambda_max")).collect();
        let lambda_max_spread = (lambdas.len() == steps.len() && !lambdas.is_empty()).then(|| {
            let hi = lambdas.iter().cloned().fold(f64::MIN, f64::max);
            let lo = lambdas.iter().cloned().fold(f64::MAX, f64::min);
            hi - lo
        });
        let deviations: Vec<f64> = steps
            .iter()
            .flat_map(|s| {
                ["retained_deviation", "interior_deviation"]
                    .into_iter()
                    .filter_map(move |m| metric(s, Analysis::Pfs, m))
            })
            .collect();
        Self {
            jacobian_condition_ratio: ratio(
                metric(first, Analysis::Pfs, "jacobian_condition"),
                metric(last, Analysis::Pfs, "jacobian_condition"),
            ),
            gain_condition_ratio: ratio(
                metric(first, Analysis::Se, "gain_condition"),
                metric(last, Analysis::Se, "gain_condition"),
            ),
            pfs_time_ratio: ratio(median(first, Analysis::Pfs), median(last, Analysis::Pfs)),
            se_time_ratio: ratio(median(first, Analysis::Se), median(last, Analysis::Se)),
            vsa_time_ratio: ratio(median(first, Analysis::Vsa), median(last, Analysis::Vsa)),
            vsa_step_ratio: ratio(
                metric(last, Analysis::Vsa, "continuation_steps"),
                metric(first, Analysis::Vsa, "continuation_steps"),
            ),
            lambda_max_spread,
            max_consistency_deviation: (!deviations.is_empty())
                .then(|| deviations.iter().cloned().fold(0.0, f64::max)),
            all_valid: steps.iter().all(|s| s.cells.len() == 3 && s.cells.iter().all(Cell::valid)),
        }
    }
}

pub const CSV_HEADER: [&str; 4] = ["step", "analysis", "metric", "value"];

/// Long-format rows `step,analysis,metric,value`, in step order, then
/// analysis order, then metric name.
pub fn to_csv(steps: &[StepReport]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for s in steps {
        let step = s.step.to_string();
        for row in [("nodes", s.nodes), ("dim", s.dim), ("eliminated_nodes", s.eliminated_nodes)] {
            w.write_record([step.as_str(), "grid", row.0, &row.1.to_string()])?;
        }
        for c in &s.cells {
            let analysis = c.analysis.name();
            let mut rows: Vec<(String, String)> = c.metrics.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
            if let Some(t) = &c.timing {
                let min = t.samples_ns.iter().min().copied().unwrap_or(0);
                let max = t.samples_ns.iter().max().copied().unwrap_or(0);
                rows.push(("median_ns".into(), t.median_ns.to_string()));
                rows.push(("min_ns".into(), min.to_string()));
                rows.push(("max_ns".into(), max.to_string()));
                rows.push(("samples".into(), t.samples_ns.len().to_string()));
            }
            if let Some(h) = &c.checksum {
                rows.push(("checksum".into(), h.clone()));
            }
            rows.push(("consistent".into(), u8::from(c.consistent).to_string()));
            rows.push(("valid".into(), u8::from(c.valid()).to_string()));
            if let Some(e) = &c.error {
                rows.push(("error".into(), e.clone()));
            }
            rows.sort();
            for (k, v) in rows {
                w.write_record([step.as_str(), analysis, &k, &v])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| IoError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| IoError::Format(e.to_string()))
}

pub fn to_json(report: &BenchmarkReport) -> Result<String, IoError> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn from_json(text: &str) -> Result<BenchmarkReport, IoError> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

pub const CSV_NAME: &str = "report.csv";
pub const JSON_NAME: &str = "report.json";

/// Writes the report into `dir` and returns the written paths.
pub fn emit_report(report: &BenchmarkReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, IoError> {
    let mut out = Vec::new();
    for f in formats {
        let (name, text) = match f {
            Format::Csv => (CSV_NAME, to_csv(&report.steps)?),
            Format::Json => (JSON_NAME, to_json(report)?),
        };
        let path = dir.join(name);
        write_file(&path, text)?;
        out.push(path);
    }
    Ok(out)
}

/// `(file name, ylabel, log scale, series)`; a series is `(analysis, metric, scale, title)`.
type Figure = (&'static str, &'static str, bool, &'static [(&'static str, &'static str, f64, &'static str)]);

const FIGURES: &[Figure] = &[
    ("pfs_time", "median time [ms]", true, &[("pfs", "median_ns", 1e-6, "power flow")]),
    ("se_time", "median time [ms]", true, &[("se", "median_ns", 1e-6, "state estimation")]),
    ("vsa_time", "median time [ms]", true, &[("vsa", "median_ns", 1e-6, "voltage stability")]),
    ("vsa_steps", "continuation steps", false, &[("vsa", "continuation_steps", 1.0, "continuation steps")]),
    (
        "conditioning",
        "condition number",
        true,
        &[
            ("pfs", "jacobian_condition", 1.0, "power-flow Jacobian"),
            ("se", "gain_condition", 1.0, "estimator gain"),
        ],
    ),
];

fn gnuplot_script(csv: &str, (name, ylabel, log, series): &Figure) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set terminal pngcairo size 800,500\n");
    s.push_str(&format!("set output '{name}.png'\n"));
    s.push_str("set xlabel 'reduction step'\nset xtics 1\n");
    s.push_str(&format!("set ylabel '{ylabel}'\n"));
    if *log {
        s.push_str("set logscale y\n");
    }
    s.push_str("set grid\nset key top right\n");
    let plots: Vec<String> = series
        .iter()
        .map(|(a, m, k, title)| {
            format!(
                "'{csv}' using 1:((strcol(2) eq '{a}' && strcol(3) eq '{m}') ? $4*{k:e} : 1/0) with linespoints title '{title}'"
            )
        })
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}

/// Writes one gnuplot script per figure into `dir`, reading `report.csv`
/// from the same directory.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut out = Vec::new();
    for fig in FIGURES {
        let path = dir.join(format!("{}.gp", fig.0));
        write_file(&path, gnuplot_script(CSV_NAME, fig))?;
        out.push(path);
    }
    Ok(out)
}
