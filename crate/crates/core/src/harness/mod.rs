//! Trace-driven evaluation: JSONL trace schema, synthetic workloads,
//! violation injection with ground-truth labels, replay, and reports.

pub mod compare;
pub mod replay;
pub mod report;
pub mod trace;
pub mod workload;

pub use compare::{compare, Backend, Comparison, ComparisonRow};
pub use replay::{replay, ReplayConfig, ReplayError};
pub use report::Report;
pub use trace::{Label, Op, Trace, TraceError, TraceEvent, TRACE_VERSION};
pub use workload::{generate, inject, WorkloadError, WorkloadParams};
