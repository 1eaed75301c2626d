//! Experiment orchestration: configuration, controller runs, comparisons,
//! parameter sweeps and ADMM statistics.

mod analysis;
mod config;
mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use analysis::{
    admm_histogram, compare_algorithms, read_iteration_counts, scalability_sweep,
    share_scale_audit, sweep, truncation_timing, ComparisonRow, ComparisonTable, Histogram,
    HistogramBucket, ScaleRow, ShareAudit, SweepParam, SweepPoint, SweepReport,
};
pub use config::{
    BatteryInit, ControllerConfig, ControllerKind, ExperimentConfig, OutputConfig, TraceSource,
};
pub use run::{
    gap_audit, run_experiment, simulate, solve_slot, v_from_fraction, write_report, AdmmSummary,
    Experiment, GapAudit, RunReport, SlotRecord, ViolationCounters,
};

use crate::admm::AdmmError;
use crate::lyapunov::{LyapunovError, OnlineError};
use crate::offline::OfflineError;
use crate::traces::TraceError;

#[derive(Debug, Error)]
pub enum ControllerFailure {
    #[error(transparent)]
    Online(#[from] OnlineError),
    #[error(transparent)]
    Offline(#[from] OfflineError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error("controller {controller}{}: {source}", slot.map(|s| format!(" at slot {s}")).unwrap_or_default())]
    Controller {
        controller: ControllerKind,
        slot: Option<usize>,
        #[source]
        source: Box<ControllerFailure>,
    },
}
