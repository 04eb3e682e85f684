use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kronflow::estimation::{build_measurement_model, emulate_pmu, rmse, wls_solve, PmuSpec};
use kronflow::grid::validate_hypotheses;
use kronflow::io::{load_model, write_file, LoadedModel, ModelPaths};
use kronflow::kron::{reduction_schedule, ReductionSchedule};
use kronflow::network::Network;
use kronflow::powerflow::{full_vs_reduced_consistency, solve_flat, NrmOptions, PowerFlowResult};
use kronflow::vsa::{run_continuation, ContinuationOptions, StepNorm, Trajectory};
use kronflow_bench::report::{emit_plots, emit_report, Format};
use kronflow_bench::{run_benchmark, BenchConfig};
use serde_json::{json, Value};

const EXIT_ANALYSIS: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "kronflow", version, about = "Kron reduction and polyphase power-system analyses")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    #[arg(long, global = true, default_value = "data/test_system/grid.json")]
    grid: PathBuf,
    #[arg(long, global = true, default_value = "data/test_system/devices.json")]
    devices: PathBuf,
    #[arg(long, global = true, default_value = "data/line_configs.json")]
    line_configs: PathBuf,
    /// Long-format loading profile CSV; without it every λ is 1.
    #[arg(long, global = true)]
    profiles: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 20190701)]
    seed: u64,
    /// Write results here instead of standard output.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Args, Clone, Copy)]
struct StepArgs {
    /// Reduction step (0 = unreduced).
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Zero-injection nodes eliminated per step.
    #[arg(long, default_value_t = 10)]
    batch: usize,
    /// Profile time step used as base loading.
    #[arg(long, default_value_t = 12)]
    loading_step: usize,
    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Check the modeling hypotheses of the grid.
    Validate,
    /// Newton power flow from a flat start.
    Pfs(StepArgs),
    /// Linear WLS state estimation on emulated PMU data.
    Se(StepArgs),
    /// Continuation power flow up to the nose point.
    Vsa {
        #[command(flatten)]
        step: StepArgs,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, value_enum, default_value_t = NormArg::Euclidean)]
        step_norm: NormArg,
        /// Resource nodes whose loading grows, by id prefix.
        #[arg(long, default_value = "L")]
        nodes: String,
    },
    /// Reduction schedule and full-vs-reduced power-flow consistency.
    Reduce {
        #[arg(long, default_value_t = 10)]
        batch: usize,
        #[arg(long, default_value_t = 12)]
        loading_step: usize,
    },
    /// Full benchmark over all schedule steps.
    Bench {
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        batch: usize,
        /// Correctness checks only, steps in parallel, no timing.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Euclidean,
    MaxComponent,
}

enum Failure {
    Input(String),
    Analysis(String),
}

type Outcome = Result<bool, Failure>;

fn input(e: impl std::fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

fn analysis(e: impl std::fmt::Display) -> Failure {
    Failure::Analysis(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_ANALYSIS),
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Analysis(m)) => {
            eprintln!("analysis failed: {m}");
            ExitCode::from(EXIT_ANALYSIS)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    let model = load_model(&ModelPaths {
        grid: g.grid.clone(),
        devices: g.devices.clone(),
        line_configs: Some(g.line_configs.clone()),
        profiles: g.profiles.clone(),
    })
    .map_err(input)?;
    match &cli.command {
        Command::Validate => validate(g, &model),
        Command::Pfs(a) => pfs(g, &model, a),
        Command::Se(a) => se(g, &model, a),
        Command::Vsa {
            step,
            sigma,
            step_norm,
            nodes,
        } => vsa(g, &model, step, *sigma, *step_norm, nodes),
        Command::Reduce { batch, loading_step } => reduce(g, &model, *batch, *loading_step),
        Command::Bench {
            samples,
            warmup,
            batch,
            parallel,
        } => bench(g, &model, *samples, *warmup, *batch, *parallel),
    }
}

fn write_out(g: &Global, name: &str, json: &Value, csv: Option<String>) -> Result<(), Failure> {
    let (ext, text) = match (g.format, csv) {
        (OutFormat::Csv, Some(c)) => ("csv", c),
        _ => ("json", serde_json::to_string_pretty(json).map_err(input)? + "\n"),
    };
    match &g.out_dir {
        Some(dir) => {
            let path = dir.join(format!("{name}.{ext}"));
            write_file(&path, text).map_err(input)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn validate(g: &Global, model: &LoadedModel) -> Outcome {
    let report = validate_hypotheses(&model.grid);
    let checks: Vec<Value> = report
        .checks
        .iter()
        .map(|c| json!({"name": c.name, "passed": c.passed, "detail": c.detail}))
        .collect();
    let out = json!({
        "nodes": model.grid.node_count(),
        "phases": model.grid.phases(),
        "branches": model.grid.branch_count(),
        "all_passed": report.all_passed(),
        "kron_eligible": report.kron_eligible,
        "checks": checks,
    });
    let csv = std::iter::once("check,passed,detail".to_string())
        .chain(report.checks.iter().map(|c| format!("{},{},\"{}\"", c.name, c.passed, c.detail.replace('"', "'"))))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    write_out(g, "validate", &out, Some(csv))?;
    Ok(report.all_passed())
}

struct Prepared {
    net: Network,
    lambda: Vec<f64>,
}

fn prepare(model: &LoadedModel, a: &StepArgs) -> Result<Prepared, Failure> {
    let schedule = reduction_schedule(&model.grid, a.batch).map_err(input)?;
    let step = schedule.steps.get(a.step).ok_or_else(|| {
        input(format!("step {} out of range (schedule has steps 0..={})", a.step, schedule.steps.len() - 1))
    })?;
    let net = Network::reduced(&model.grid, &model.devices, step).map_err(input)?;
    let lambda = loading(model, &net, a.loading_step)?;
    Ok(Prepared { net, lambda })
}

fn loading(model: &LoadedModel, net: &Network, step: usize) -> Result<Vec<f64>, Failure> {
    match &model.profiles {
        Some(p) => net.devices().loading_at(p, step).map_err(input),
        None => Ok(net.uniform_loading(1.0)),
    }
}

fn solve(p: &Prepared, tolerance: f64) -> Result<(PowerFlowResult, u128), Failure> {
    let opts = NrmOptions {
        tolerance,
        condition: true,
        ..NrmOptions::default()
    };
    let start = Instant::now();
    let sol = solve_flat(&p.net, &p.lambda, &opts).map_err(analysis)?;
    Ok((sol, start.elapsed().as_nanos()))
}

fn terminal_labels(net: &Network) -> Vec<(String, usize)> {
    net.nodes()
        .iter()
        .flat_map(|n| (0..net.phases()).map(move |k| (n.id.clone(), k)))
        .collect()
}

fn voltage_table(net: &Network, v: &[num_complex::Complex64]) -> (Vec<Value>, String) {
    let mut csv = String::from("node,phase,magnitude,angle_deg\n");
    let rows = terminal_labels(net)
        .into_iter()
        .zip(v)
        .map(|((node, phase), x)| {
            let (m, a) = (x.norm(), x.arg().to_degrees());
            csv.push_str(&format!("{node},{phase},{m},{a}\n"));
            json!({"node": node, "phase": phase, "magnitude": m, "angle_deg": a})
        })
        .collect();
    (rows, csv)
}

fn pfs(g: &Global, model: &LoadedModel, a: &StepArgs) -> Outcome {
    let p = prepare(model, a)?;
    let (sol, ns) = solve(&p, a.tolerance)?;
    let (rows, csv) = voltage_table(&p.net, &sol.voltages());
    let out = json!({
        "step": a.step,
        "dim": p.net.dim(),
        "iterations": sol.iterations,
        "converged": sol.converged,
        "final_mismatch_inf": sol.final_mismatch_inf,
        "jacobian_condition": sol.jacobian_condition,
        "wall_time_ns": ns as u64,
        "voltages": rows,
    });
    write_out(g, &format!("pfs_step{}", a.step), &out, Some(csv))?;
    Ok(sol.converged)
}

fn se(g: &Global, model: &LoadedModel, a: &StepArgs) -> Outcome {
    let p = prepare(model, a)?;
    let (sol, _) = solve(&p, a.tolerance)?;
    let truth = sol.voltages();
    let pmu = PmuSpec::default();
    let m = build_measurement_model(&p.net, &model.grid.base(), &pmu, &truth).map_err(analysis)?;
    let y = emulate_pmu(&truth, &m, &pmu, g.seed).map_err(analysis)?;
    let m = m.with_measurements(y).map_err(analysis)?;
    let start = Instant::now();
    let est = wls_solve(&m).map_err(analysis)?;
    let ns = start.elapsed().as_nanos() as u64;
    let v = est.voltages();
    let (rows, csv) = voltage_table(&p.net, &v);
    let out = json!({
        "step": a.step,
        "dim": p.net.dim(),
        "seed": g.seed,
        "gain_condition": est.gain_condition,
        "rmse": rmse(&v, &truth),
        "residual_norm": est.residual_norm,
        "wall_time_ns": ns,
        "estimate": rows,
    });
    write_out(g, &format!("se_step{}", a.step), &out, Some(csv))?;
    Ok(true)
}

fn vsa(g: &Global, model: &LoadedModel, a: &StepArgs, sigma: f64, norm: NormArg, prefix: &str) -> Outcome {
    let p = prepare(model, a)?;
    let direction: Vec<f64> = p
        .net
        .resource_ids()
        .map(|id| if id.starts_with(prefix) { 1.0 } else { 0.0 })
        .collect();
    let traj = Trajectory::new(p.lambda.clone(), direction).map_err(input)?;
    let opts = ContinuationOptions {
        sigma,
        tolerance: a.tolerance,
        step_norm: match norm {
            NormArg::Euclidean => StepNorm::Euclidean,
            NormArg::MaxComponent => StepNorm::MaxComponent,
        },
        ..ContinuationOptions::default()
    };
    let start = Instant::now();
    let res = run_continuation(&p.net, &traj, &opts, false).map_err(analysis)?;
    let ns = start.elapsed().as_nanos() as u64;
    let mut csv = String::from("xi,min_magnitude,max_magnitude,sigma,continuation_index\n");
    for t in &res.trace {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            t.xi, t.min_magnitude, t.max_magnitude, t.sigma, t.continuation_index
        ));
    }
    let out = json!({
        "step": a.step,
        "lambda_max": res.lambda_max,
        "steps": res.steps,
        "wall_time_ns": ns,
        "trace": res.trace,
    });
    write_out(g, &format!("vsa_step{}", a.step), &out, Some(csv))?;
    Ok(true)
}

fn reduce(g: &Global, model: &LoadedModel, batch: usize, loading_step: usize) -> Outcome {
    let schedule: ReductionSchedule = reduction_schedule(&model.grid, batch).map_err(input)?;
    let full = Network::full(&model.grid, &model.devices).map_err(input)?;
    let lambda = loading(model, &full, loading_step)?;
    let report = full_vs_reduced_consistency(
        &model.grid,
        &model.devices,
        &schedule,
        &lambda,
        &NrmOptions::default(),
        1e-8,
    )
    .map_err(analysis)?;
    let mut csv = String::from("step,dim,iterations,retained_deviation,interior_deviation,passed\n");
    let steps: Vec<Value> = schedule
        .steps
        .iter()
        .zip(&report.steps)
        .map(|(s, c)| {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.step,
                s.retained.len(),
                c.iterations,
                c.retained_deviation,
                c.interior_deviation,
                c.passed
            ));
            json!({
                "step": c.step,
                "dim": s.retained.len(),
                "eliminated": s.eliminated.len(),
                "iterations": c.iterations,
                "retained_deviation": c.retained_deviation,
                "interior_deviation": c.interior_deviation,
                "passed": c.passed,
            })
        })
        .collect();
    let out = json!({
        "batch": batch,
        "uneven_final_batch": schedule.uneven_final_batch,
        "tolerance": report.tolerance,
        "all_passed": report.all_passed(),
        "steps": steps,
    });
    write_out(g, "reduce", &out, Some(csv))?;
    Ok(report.all_passed())
}

fn bench(g: &Global, model: &LoadedModel, samples: usize, warmup: usize, batch: usize, parallel: bool) -> Outcome {
    let schedule = reduction_schedule(&model.grid, batch).map_err(input)?;
    let config = BenchConfig {
        batch,
        samples,
        warmup,
        seed: g.seed,
        parallel,
        ..BenchConfig::default()
    };
    let report = run_benchmark(&model.grid, &model.devices, model.profiles.as_ref(), &schedule, &config)
        .map_err(input)?;
    let dir = g.out_dir.clone().unwrap_or_else(|| PathBuf::from("bench-out"));
    let formats = match g.format {
        OutFormat::Json => [Format::Json, Format::Csv],
        OutFormat::Csv => [Format::Csv, Format::Json],
    };
    let mut written = emit_report(&report, &dir, &formats).map_err(input)?;
    written.extend(emit_plots(&dir).map_err(input)?);
    for p in &written {
        eprintln!("wrote {}", p.display());
    }
    print_summary(&report, &dir);
    Ok(report.summary.all_valid)
}

fn print_summary(report: &kronflow_bench::BenchmarkReport, dir: &Path) {
    let s = &report.summary;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("benchmark: {} ({} steps, {:.1} s)", report.system, report.steps.len(), report.wall_time_s);
    println!("  cond(J) ratio        {}", show(s.jacobian_condition_ratio));
    println!("  cond(gain) ratio     {}", show(s.gain_condition_ratio));
    println!("  PFS time ratio       {}", show(s.pfs_time_ratio));
    println!("  SE time ratio        {}", show(s.se_time_ratio));
    println!("  VSA time ratio       {}", show(s.vsa_time_ratio));
    println!("  VSA step ratio       {}", show(s.vsa_step_ratio));
    println!("  λ_max spread         {}", show(s.lambda_max_spread));
    println!("  all cells valid      {}", s.all_valid);
    println!("  output               {}", dir.display());
}
