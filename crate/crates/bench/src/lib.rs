//! Benchmark harness around the `fastadasp` runtime: seeded fixtures, single
//! runs, policy x target sweeps and their CSV / markdown reports.

pub mod config;
pub mod error;
pub mod fixture;
pub mod report;
pub mod run;

pub use error::{BenchError, Result};
