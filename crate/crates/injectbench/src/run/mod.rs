//! Run orchestration: planning, execution, persistence, resume.
//!
//! A run lives in a directory:
//!
//! ```text
//! run_dir/
//!   config.json    canonical snapshot of the resolved config
//!   manifest.json  planned/completed/failed counts, config digest
//!   trials.jsonl   one TrialRecord per completed trial, append-only
//!   errors.jsonl   one line per failed trial attempt
//!   metrics.json   aggregated report, written once the run is complete
//!   cache/         response cache (shareable across runs)
//!   lock           pid of the process currently executing
//! ```
//!
//! Crashes lose at most the trial in flight: records are flushed line by
//! line, and resuming skips ids already on disk and retries failures.

mod execute;
mod persist;
mod schedule;

pub use execute::{execute_run, ExecuteOptions, RunSummary};
pub use persist::{load_trials, read_manifest, RunLock, RunPaths};
pub(crate) use persist::{write_json_atomic, JsonlWriter};
pub use schedule::{
    plan_trials, PlanCounts, TrialPlan, TrialSpec, GOAL_HIJACK_ITEM_ID, GOAL_HIJACK_TASK_ID,
};

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackError;
use crate::config::ConfigError;
use crate::defense::DefenseError;
use crate::gateway::GatewayError;
use crate::metrics::MetricsError;
use crate::task::TaskError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory is locked by live process {pid} ({path})")]
    LockHeld { path: String, pid: u32 },
    #[error("{path} already holds trials; pass resume to continue the run")]
    WouldOverwrite { path: String },
    #[error("config does not match this run directory (digest {found}, expected {expected})")]
    ConfigDrift { expected: String, found: String },
    #[error("{path}:{line}: corrupt trial record: {message}")]
    CorruptTrials {
        path: String,
        line: usize,
        message: String,
    },
    #[error("planner produced duplicate trial id '{trial_id}'")]
    DuplicatePlannedTrial { trial_id: String },
    #[error("no reference output for {key}; reference phase incomplete")]
    MissingReference { key: String },
}

impl RunError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

// ─── Clocks ─────────────────────────────────────────────────────────────────

/// Timestamp source. Runs use the system clock; the refinement loop swaps in
/// a [`LogicalClock`] so its audit trail is byte-identical across reruns.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Monotone counter rendered as seconds since the epoch: deterministic,
/// strictly increasing, thread-safe.
#[derive(Debug, Default)]
pub struct LogicalClock {
    ticks: AtomicI64,
}

impl LogicalClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let tick = self.ticks.fetch_add(1, Ordering::Relaxed);
        DateTime::from_timestamp(tick, 0).expect("small tick values are valid timestamps")
    }
}

// ─── Manifest ───────────────────────────────────────────────────────────────

/// Run bookkeeping, rewritten after every execution pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub model: String,
    pub planned: PlanCounts,
    /// Trials with a record in `trials.jsonl`.
    pub completed: usize,
    /// Trials whose last attempt failed (they retry on resume).
    pub failed: usize,
    /// True when execution stopped before covering the plan.
    pub interrupted: bool,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl RunManifest {
    /// All planned trials have records.
    pub fn is_complete(&self) -> bool {
        self.completed == self.planned.total()
    }
}
