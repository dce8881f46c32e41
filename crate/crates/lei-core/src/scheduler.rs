//! Step 4: gate each validated script on current resource headroom, execute
//! the admitted ones sequentially in the sandbox, and publish both the dated
//! execution log and the per-run results document.

use crate::clock::{format_ts, parse_ts, seconds_between, ts_serde, Clock};
use crate::fsutil;
use crate::resource_monitor::{MonitorError, ResourceSummary, WindowKey};
use crate::sandbox::Sandbox;
use crate::validator::failure_message;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("malformed execution log line {line} in {path}: {message}")]
    MalformedLine { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Headroom limits the gate enforces before each script.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadroomThresholds {
    pub cpu_max_pct: f64,
    pub mem_min_available_mb: f64,
    /// Used to decide whether the summary itself is too old to trust.
    pub sampling_interval_s: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadroomVerdict {
    Sufficient,
    Insufficient,
}

/// The gate's decision plus the readings it was based on.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadroomDecision {
    pub verdict: HeadroomVerdict,
    pub cpu_avg_1m: Option<f64>,
    pub mem_available_mb: f64,
    /// True when the summary was older than twice the sampling interval.
    pub stale: bool,
    pub reason: Option<String>,
}

/// Decide whether one more script may run right now. The summary must be
/// fresh (no older than twice the sampling interval), its 1-minute CPU
/// average must not exceed the limit, and available memory must not fall
/// below the floor. Any missing input fails conservative.
pub fn check_resource(
    summary: &ResourceSummary,
    limits: &HeadroomThresholds,
    now: DateTime<Utc>,
) -> HeadroomDecision {
    let cpu_avg_1m = summary.cpu_avg_pct.get(&WindowKey(1)).copied();
    let age_s = seconds_between(summary.timestamp, now);
    let stale = age_s > 2.0 * limits.sampling_interval_s as f64;

    let insufficient = |reason: String| HeadroomDecision {
        verdict: HeadroomVerdict::Insufficient,
        cpu_avg_1m,
        mem_available_mb: summary.mem_available_mb,
        stale,
        reason: Some(reason),
    };

    if stale {
        return insufficient(format!("resource summary is stale (age {age_s:.1}s)"));
    }
    let Some(cpu) = cpu_avg_1m else {
        return insufficient("resource summary lacks a 1m window".into());
    };
    if cpu > limits.cpu_max_pct {
        return insufficient(format!(
            "cpu 1m average {cpu:.1}% exceeds limit {:.1}%",
            limits.cpu_max_pct
        ));
    }
    if summary.mem_available_mb < limits.mem_min_available_mb {
        return insufficient(format!(
            "available memory {:.1} MB below floor {:.1} MB",
            summary.mem_available_mb, limits.mem_min_available_mb
        ));
    }
    HeadroomDecision {
        verdict: HeadroomVerdict::Sufficient,
        cpu_avg_1m,
        mem_available_mb: summary.mem_available_mb,
        stale,
        reason: None,
    }
}

/// Outcome category for one scheduled script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Success,
    Failure,
    SkippedResources,
}

impl std::fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecStatus::Success => f.write_str("SUCCESS"),
            ExecStatus::Failure => f.write_str("FAILURE"),
            ExecStatus::SkippedResources => f.write_str("SKIPPED_RESOURCES"),
        }
    }
}

impl std::str::FromStr for ExecStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SUCCESS" => Ok(ExecStatus::Success),
            "FAILURE" => Ok(ExecStatus::Failure),
            "SKIPPED_RESOURCES" => Ok(ExecStatus::SkippedResources),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// Full record of one scheduling decision and (when run) its execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub run_id: u64,
    pub task_name: String,
    #[serde(with = "ts_serde")]
    pub start_time: DateTime<Utc>,
    /// Zero when the script was skipped.
    pub duration_ms: u64,
    pub status: ExecStatus,
    /// Parsed stdout, present only on success.
    pub output: Option<Value>,
    pub failure_reason: Option<String>,
}

/// Run validated scripts in order, re-checking headroom before each one.
/// A skipped script never aborts the sweep, and exactly one script runs at a
/// time. `headroom` supplies the freshest summary (or an error, which skips
/// conservatively).
pub fn execute_validated(
    entries: &[(String, PathBuf)],
    raw_data: &Path,
    sandbox: &Sandbox,
    headroom: &mut dyn FnMut() -> Result<ResourceSummary, MonitorError>,
    limits: &HeadroomThresholds,
    clock: &dyn Clock,
    run_id: u64,
) -> Vec<ExecutionRecord> {
    let mut records = Vec::with_capacity(entries.len());
    for (task_name, script_path) in entries {
        let decision = match headroom() {
            Ok(summary) => check_resource(&summary, limits, clock.now()),
            Err(e) => HeadroomDecision {
                verdict: HeadroomVerdict::Insufficient,
                cpu_avg_1m: None,
                mem_available_mb: 0.0,
                stale: true,
                reason: Some(format!("resource summary unavailable: {e}")),
            },
        };
        if decision.verdict == HeadroomVerdict::Insufficient {
            records.push(ExecutionRecord {
                run_id,
                task_name: task_name.clone(),
                start_time: clock.now(),
                duration_ms: 0,
                status: ExecStatus::SkippedResources,
                output: None,
                failure_reason: decision.reason,
            });
            continue;
        }

        let start_time = clock.now();
        let result = sandbox.run_script(script_path, raw_data);
        let duration_ms = (seconds_between(start_time, clock.now()) * 1000.0).round() as u64;
        let (status, output, failure_reason) = if result.succeeded() {
            match result.parsed_output.clone() {
                Some(value) => (ExecStatus::Success, Some(value), None),
                None => (
                    ExecStatus::Failure,
                    None,
                    Some(failure_message(&result, sandbox.timeout())),
                ),
            }
        } else {
            (ExecStatus::Failure, None, Some(failure_message(&result, sandbox.timeout())))
        };
        records.push(ExecutionRecord {
            run_id,
            task_name: task_name.clone(),
            start_time,
            duration_ms,
            status,
            output,
            failure_reason,
        });
    }
    records
}

// ---------------------------------------------------------------------------
// Execution log
// ---------------------------------------------------------------------------

/// The pipe-delimited line format persisted to the dated execution log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLogEntry {
    #[serde(with = "ts_serde")]
    pub start_time: DateTime<Utc>,
    pub run_id: u64,
    pub task_name: String,
    pub duration_ms: u64,
    pub status: ExecStatus,
}

impl ExecutionLogEntry {
    pub fn from_record(record: &ExecutionRecord) -> Self {
        ExecutionLogEntry {
            start_time: record.start_time,
            run_id: record.run_id,
            task_name: record.task_name.clone(),
            duration_ms: record.duration_ms,
            status: record.status,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} | run={} | task={} | duration_ms={} | status={}",
            format_ts(self.start_time),
            self.run_id,
            self.task_name,
            self.duration_ms,
            self.status
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.split(" | ").collect();
        if parts.len() != 5 {
            return Err(format!("expected 5 fields, found {}", parts.len()));
        }
        let start_time =
            parse_ts(parts[0]).map_err(|e| format!("bad timestamp `{}`: {e}", parts[0]))?;
        let run_id = parts[1]
            .strip_prefix("run=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("bad run field `{}`", parts[1]))?;
        let task_name = parts[2]
            .strip_prefix("task=")
            .ok_or_else(|| format!("bad task field `{}`", parts[2]))?
            .to_string();
        let duration_ms = parts[3]
            .strip_prefix("duration_ms=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("bad duration field `{}`", parts[3]))?;
        let status = parts[4]
            .strip_prefix("status=")
            .ok_or_else(|| format!("bad status field `{}`", parts[4]))?
            .parse()?;
        Ok(ExecutionLogEntry { start_time, run_id, task_name, duration_ms, status })
    }
}

/// Name of the dated execution log holding entries for `date`.
pub fn execution_log_name(date: DateTime<Utc>) -> String {
    format!("edge_execution_{}.log", date.format("%Y%m%d"))
}

/// Append one entry to the execution log named by the entry's own date.
/// Returns the log path written to.
pub fn append_log(logs_root: &Path, record: &ExecutionRecord) -> std::io::Result<PathBuf> {
    let entry = ExecutionLogEntry::from_record(record);
    let path = logs_root.join(execution_log_name(entry.start_time));
    fsutil::append_line(&path, &entry.to_line())?;
    Ok(path)
}

/// One element of the per-run results document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub task_name: String,
    pub status: ExecStatus,
    /// Null unless the script succeeded.
    pub output: Option<Value>,
}

/// Write `results_{run_id}.json` into the results directory.
pub fn publish_outputs(
    results_dir: &Path,
    run_id: u64,
    records: &[ExecutionRecord],
) -> std::io::Result<PathBuf> {
    let entries: Vec<ResultEntry> = records
        .iter()
        .map(|r| ResultEntry {
            task_name: r.task_name.clone(),
            status: r.status,
            output: if r.status == ExecStatus::Success { r.output.clone() } else { None },
        })
        .collect();
    let path = results_dir.join(format!("results_{run_id}.json"));
    fsutil::atomic_write_json(&path, &entries)?;
    Ok(path)
}
