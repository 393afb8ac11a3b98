//! Scenario files, workloads, runs, traces, metrics and audits.

pub mod audit;
pub mod metrics;
pub mod runner;
pub mod scenario;
pub mod trace;
pub mod workload;

pub use audit::{audit, AuditReport, Check, Outcome};
pub use metrics::{Metrics, RemovalCounts};
pub use runner::{compare, golden, run, run_json, Comparison, ModeSummary, RunOutcome, GOLDEN};
pub use scenario::{Scenario, ScenarioError};
pub use trace::{read_trace, trace_to_string, write_trace, RunStatus, TraceBody, TraceError, TraceRecord};
pub use workload::{generate_workload, Workload, WorkloadSpec};
