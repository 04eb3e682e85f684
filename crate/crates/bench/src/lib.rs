//! Benchmark of Kron reduction on a 116-node three-phase system, plus the
//! `kronflow` command-line tool.

pub mod harness;
pub mod report;
pub mod testsystem;

pub use harness::{run_benchmark, Analysis, BenchConfig, BenchError, Cell, StepReport, Timing};
pub use report::{emit_plots, emit_report, BenchmarkReport, Format, Summary};
pub use testsystem::{build_test_system, load_test_system, TestSystem, TestSystemFiles, TestSystemSpec};
