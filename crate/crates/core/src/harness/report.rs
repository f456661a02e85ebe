//! Machine-readable run reports (JSON) and sweep tables (CSV).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::CacheMode;
use crate::calibration::CalibMethod;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::divergence::DivergenceSummary;
use crate::harness::macs::MacEstimate;
use crate::ledger::MacKind;

pub const REPORT_SCHEMA: &str = "icc-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacSummary {
    pub measured_total: u64,
    pub measured_block: u64,
    pub measured_overhead: u64,
    pub by_kind: BTreeMap<MacKind, u64>,
    pub estimated: MacEstimate,
    /// Analytic block MACs equal the measured ledger exactly.
    pub block_estimate_matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub mode: CacheMode,
    pub period: usize,
    pub rank: Option<usize>,
    pub method: Option<CalibMethod>,
    pub seeds: Vec<u64>,
    /// MACs of a single trajectory (identical for every seed).
    pub macs: MacSummary,
    pub divergence: DivergenceSummary,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
}

impl Report {
    pub fn new(command: impl Into<String>, config: ExperimentConfig, runs: Vec<RunReport>) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            command: command.into(),
            config,
            runs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Config(format!("unsupported report schema {}", r.schema)));
        }
        Ok(r)
    }

    /// JSON with every wall-time field zeroed; the deterministic payload.
    pub fn payload_without_timing(&self) -> String {
        let mut copy = self.clone();
        copy.runs.iter_mut().for_each(|r| r.wall_time_ms = 0.0);
        copy.to_json()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "label",
            "mode",
            "period",
            "rank",
            "method",
            "seeds",
            "measured_total_macs",
            "measured_block_macs",
            "estimated_block_macs",
            "block_estimate_matches",
            "final_mse_mean",
            "final_mse_std",
            "final_mse_max",
            "final_max_abs_max",
            "wall_time_ms",
        ])
        .map_err(csv_err)?;
        for r in &self.runs {
            w.write_record([
                r.label.clone(),
                r.mode.name().to_string(),
                r.period.to_string(),
                r.rank.map(|v| v.to_string()).unwrap_or_default(),
                r.method.map(|m| m.tag().to_string()).unwrap_or_default(),
                r.seeds.len().to_string(),
                r.macs.measured_total.to_string(),
                r.macs.measured_block.to_string(),
                r.macs.estimated.block.to_string(),
                r.macs.block_estimate_matches.to_string(),
                format!("{:e}", r.divergence.final_mse_mean),
                format!("{:e}", r.divergence.final_mse_std),
                format!("{:e}", r.divergence.final_mse_max),
                format!("{:e}", r.divergence.final_max_abs_max),
                format!("{:.3}", r.wall_time_ms),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
