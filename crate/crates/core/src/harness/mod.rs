//! Configuration, the round driver, CSV traces and diagnostics.

mod config;
mod driver;
pub mod selftest;
mod trace;

pub use config::{RunConfig, SyntheticKind, Variant};
pub use driver::{bits_report, compare, load_shards, run, run_with_shards, BitsReport, Simulation};
pub use trace::{write_compare_csv, write_trace_csv, TraceRow};
