use std::collections::BTreeMap;
use std::path::Path;

use kronflow_bench::harness::{checksum, median, time_runs};
use kronflow_bench::report::{emit_plots, emit_report, from_json, to_csv, to_json, Format, CSV_NAME};
use kronflow_bench::{Analysis, BenchConfig, BenchmarkReport, Cell, StepReport, Summary, Timing};

fn cell(analysis: Analysis, metrics: &[(&str, f64)], samples: &[u64]) -> Cell {
    Cell {
        analysis,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        timing: Some(Timing::from_samples(3, samples.to_vec())),
        checksum: Some(checksum(&[1.0, metrics.len() as f64])),
        consistent: true,
        error: None,
    }
}

fn step(step: usize, dim: usize, cond_j: f64, cond_g: f64, ns: u64, cont: f64) -> StepReport {
    StepReport {
        step,
        nodes: dim / 3,
        dim,
        eliminated_nodes: 10 * step,
        cells: vec![
            cell(Analysis::Pfs, &[("iterations", 4.0), ("jacobian_condition", cond_j)], &[ns, ns + 2, ns + 1]),
            cell(Analysis::Se, &[("gain_condition", cond_g), ("rmse", 1.5e-4)], &[ns / 2, ns / 2]),
            cell(Analysis::Vsa, &[("continuation_steps", cont), ("lambda_max", 1.4 + 1e-3 * step as f64)], &[10 * ns]),
        ],
    }
}

fn synthetic() -> BenchmarkReport {
    let steps = vec![step(0, 12, 2000.0, 4e9, 1000, 70.0), step(1, 6, 100.0, 1e4, 100, 30.0)];
    let summary = Summary::from_steps(&steps);
    BenchmarkReport {
        system: "synthetic".into(),
        config: BenchConfig::default(),
        steps,
        summary,
        wall_time_s: 1.25,
    }
}

const EXPECTED_CSV: &str = "\
step,analysis,metric,value
0,grid,nodes,4
0,grid,dim,12
0,grid,eliminated_nodes,0
0,pfs,checksum,dc91ce9a50ddc828740aa26743716897fdb2bb64f1db662fe263a59be56145ae
0,pfs,consistent,1
0,pfs,iterations,4
0,pfs,jacobian_condition,2000
0,pfs,max_ns,1002
0,pfs,median_ns,1001
0,pfs,min_ns,1000
0,pfs,samples,3
0,pfs,valid,1
";

#[test]
fn empty_report_is_header_only() {
    assert_eq!(to_csv(&[]).unwrap(), "step,analysis,metric,value\n");
}

#[test]
fn csv_is_byte_stable() {
    let r = synthetic();
    let a = to_csv(&r.steps).unwrap();
    assert_eq!(a, to_csv(&synthetic().steps).unwrap());
    let head: String = a.lines().take(13).map(|l| format!("{l}\n")).collect();
    assert_eq!(head, EXPECTED_CSV);
    // 3 grid rows + per cell: metrics + 4 timing + checksum + consistent + valid
    assert_eq!(a.lines().count(), 1 + 2 * (3 + (2 + 7) * 3));
}

#[test]
fn csv_records_errors() {
    let mut r = synthetic();
    r.steps[1].cells[2] = Cell {
        analysis: Analysis::Vsa,
        metrics: BTreeMap::new(),
        timing: None,
        checksum: None,
        consistent: false,
        error: Some("corrector failed at ξ = 1.3, after 6 halvings".into()),
    };
    let csv = to_csv(&r.steps).unwrap();
    assert!(csv.contains("1,vsa,error,\"corrector failed at ξ = 1.3, after 6 halvings\"\n"));
    assert!(csv.contains("1,vsa,valid,0\n"));
    assert!(!Summary::from_steps(&r.steps).all_valid);
}

#[test]
fn json_round_trips() {
    let r = synthetic();
    let back = from_json(&to_json(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn summary_ratios() {
    let s = synthetic().summary;
    assert_eq!(s.jacobian_condition_ratio, Some(20.0));
    assert_eq!(s.gain_condition_ratio, Some(4e5));
    assert_eq!(s.pfs_time_ratio, Some(1001.0 / 101.0));
    assert_eq!(s.se_time_ratio, Some(10.0));
    assert_eq!(s.vsa_step_ratio, Some(30.0 / 70.0));
    assert!((s.lambda_max_spread.unwrap() - 1e-3).abs() < 1e-15);
    assert!(s.all_valid);
    assert_eq!(Summary::from_steps(&[]), Summary::default());
}

fn schema(name: &str) -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn json_report_matches_schema() {
    let schema = schema("report.schema.json");
    let report: serde_json::Value = serde_json::from_str(&to_json(&synthetic()).unwrap()).unwrap();
    jsonschema::validate(&schema, &report).unwrap();

    let mut broken = report.clone();
    broken["steps"][0]["cells"][0]["analysis"] = "opf".into();
    assert!(jsonschema::validate(&schema, &broken).is_err());
}

#[test]
fn emitted_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested");
    let written = emit_report(&synthetic(), &out, &[Format::Csv, Format::Json]).unwrap();
    assert_eq!(written.len(), 2);
    let csv = std::fs::read_to_string(out.join(CSV_NAME)).unwrap();
    assert!(csv.starts_with("step,analysis,metric,value\n"));
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(from_json(&json).unwrap(), synthetic());

    let plots = emit_plots(&out).unwrap();
    assert_eq!(plots.len(), 5);
    for p in &plots {
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.contains("set datafile separator ','"));
        assert!(text.contains(&format!("'{CSV_NAME}'")));
    }
    let cond = std::fs::read_to_string(out.join("conditioning.gp")).unwrap();
    assert!(cond.contains("strcol(3) eq 'jacobian_condition'") && cond.contains("strcol(3) eq 'gain_condition'"));
}

#[test]
fn median_and_warmup() {
    assert_eq!(median(&[5, 1, 3]), 3.0);
    assert_eq!(median(&[4, 1, 3, 2]), 2.5);
    assert!(median(&[]).is_nan());
    let mut calls = 0;
    let t = time_runs(3, 5, || {
        calls += 1;
        Ok::<(), String>(())
    })
    .unwrap();
    assert_eq!(calls, 8);
    assert_eq!(t.samples_ns.len(), 5);
    assert_eq!(t.warmup, 3);

    let mut n = 0;
    let err = time_runs(1, 3, || {
        n += 1;
        if n == 2 {
            Err("boom")
        } else {
            Ok(())
        }
    });
    assert_eq!(err.unwrap_err(), "boom");
}

#[test]
fn checksum_is_sha256_of_le_bytes() {
    // SHA-256 of eight zero bytes
    assert_eq!(checksum(&[0.0]), "af5570f5a1810b7af78caf4bc70a660f0df51e42baf91d4de5b2328de0e83dfc");
    assert_ne!(checksum(&[0.0]), checksum(&[-0.0]));
}
