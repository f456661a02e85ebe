//! Experiment harness: configuration, MAC accounting, divergence metrics,
//! tensor containers and reports.

pub mod config;
pub mod divergence;
pub mod experiment;
pub mod io;
pub mod macs;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use experiment::{configure_threads, Cell, Engine, MacCheck};
pub use macs::{estimate_macs, ArchSpec, MacEstimate};
pub use report::{Report, RunReport, REPORT_SCHEMA};
