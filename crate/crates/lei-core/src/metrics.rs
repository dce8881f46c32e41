//! Derived metrics and the machine-readable pipeline report: step timings,
//! funnel counts, reliability and success rates, token throughput, and
//! cross-run resource utilization. The report is a pure function of the
//! persisted logs, so recompiling it yields byte-identical output.

use crate::clock::{ts_serde, Clock};
use crate::llm_client::{ExchangeOutcome, ExchangeRecord};
use crate::pipeline::{RunManifest, RunValidationRecord};
use crate::resource_monitor::{ResourceProperty, StepSampleRecord};
use crate::scheduler::{ExecStatus, ExecutionLogEntry};
use crate::step::StepId;
use crate::validator::ValidationStatus;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("no run had a non-empty validation set")]
    NoEligibleRuns,
    #[error("no executions were attempted")]
    NoExecutions,
    #[error("log file missing: {0}")]
    MissingFile(PathBuf),
    #[error("report invariant violated: {0}")]
    InvariantViolation(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Clock-observed bounds of one pipeline step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: StepId,
    #[serde(with = "ts_serde")]
    pub start: DateTime<Utc>,
    #[serde(with = "ts_serde")]
    pub end: DateTime<Utc>,
    pub duration_s: f64,
}

impl StepTiming {
    pub fn new(step: StepId, start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        StepTiming { step, start, end, duration_s: crate::clock::seconds_between(start, end) }
    }
}

/// Mark a step's start and compute its timing when done.
pub fn time_step(step: StepId, clock: &dyn Clock, body: impl FnOnce()) -> StepTiming {
    let start = clock.now();
    body();
    StepTiming::new(step, start, clock.now())
}

/// How many items survived each stage of one run (or, summed, of all runs).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    /// New tasks accepted from step 1.
    pub tasks_proposed: u64,
    /// Scripts persisted by step 2.
    pub scripts_generated: u64,
    /// Scripts handed to the validator (equals `scripts_generated`).
    pub reached_validator: u64,
    pub passed_validation: u64,
    pub failed_validation: u64,
    /// Validated scripts handed to the scheduler this run.
    pub reached_step4: u64,
    /// Scheduled scripts that executed successfully.
    pub executed_ok: u64,
}

impl FunnelCounts {
    pub fn accumulate(&mut self, other: &FunnelCounts) {
        self.tasks_proposed += other.tasks_proposed;
        self.scripts_generated += other.scripts_generated;
        self.reached_validator += other.reached_validator;
        self.passed_validation += other.passed_validation;
        self.failed_validation += other.failed_validation;
        self.reached_step4 += other.reached_step4;
        self.executed_ok += other.executed_ok;
    }

    /// Verify stage-to-stage conservation; `scope` labels the error message.
    pub fn check(&self, scope: &str) -> Result<(), MetricsError> {
        let bad = |msg: String| Err(MetricsError::InvariantViolation(format!("{scope}: {msg}")));
        if self.scripts_generated > self.tasks_proposed {
            return bad(format!(
                "scripts_generated {} exceeds tasks_proposed {}",
                self.scripts_generated, self.tasks_proposed
            ));
        }
        if self.reached_validator != self.scripts_generated {
            return bad(format!(
                "reached_validator {} != scripts_generated {}",
                self.reached_validator, self.scripts_generated
            ));
        }
        if self.passed_validation + self.failed_validation != self.reached_validator {
            return bad(format!(
                "passed {} + failed {} != reached_validator {}",
                self.passed_validation, self.failed_validation, self.reached_validator
            ));
        }
        if self.reached_step4 > self.passed_validation {
            return bad(format!(
                "reached_step4 {} exceeds passed_validation {}",
                self.reached_step4, self.passed_validation
            ));
        }
        if self.executed_ok > self.reached_step4 {
            return bad(format!(
                "executed_ok {} exceeds reached_step4 {}",
                self.executed_ok, self.reached_step4
            ));
        }
        Ok(())
    }
}

/// Sum the present step durations; also report which steps are absent.
pub fn end_to_end_latency(timings: &[StepTiming]) -> (f64, Vec<StepId>) {
    let total = timings.iter().map(|t| t.duration_s).sum();
    let absent = StepId::ALL
        .into_iter()
        .filter(|step| !timings.iter().any(|t| t.step == *step))
        .collect();
    (total, absent)
}

/// Prompt tokens per second of prompt evaluation; `None` when the duration
/// was not reported.
pub fn prompt_tokens_per_second(usage: &crate::llm_client::LlmUsage) -> Option<f64> {
    if usage.prompt_eval_duration_ns == 0 {
        return None;
    }
    Some(usage.prompt_tokens as f64 / (usage.prompt_eval_duration_ns as f64 / 1e9))
}

/// Completion tokens per second of generation; `None` when the duration was
/// not reported.
pub fn completion_tokens_per_second(usage: &crate::llm_client::LlmUsage) -> Option<f64> {
    if usage.eval_duration_ns == 0 {
        return None;
    }
    Some(usage.completion_tokens as f64 / (usage.eval_duration_ns as f64 / 1e9))
}

/// Share of validated scripts among all scripts that reached the validator:
/// `(passed_initial + passed_after_fix) / total`.
pub fn reliability(statuses: &[ValidationStatus]) -> Result<f64, MetricsError> {
    if statuses.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let passed = statuses
        .iter()
        .filter(|s| {
            matches!(s, ValidationStatus::PassedInitial | ValidationStatus::PassedAfterFix)
        })
        .count();
    Ok(passed as f64 / statuses.len() as f64)
}

/// Validation submissions and passes for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunValidationCounts {
    pub run_id: u64,
    pub submitted: u64,
    pub passed: u64,
}

/// A rate averaged across runs, with the excluded (empty) runs counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateOverRuns {
    /// Unweighted mean of per-run rates over eligible runs.
    pub mean_rate: f64,
    pub eligible_runs: u64,
    /// Runs that submitted nothing and were excluded from the mean.
    pub excluded_runs: u64,
}

/// Mean per-run validation pass rate; runs that submitted no scripts are
/// excluded (and counted) rather than treated as zero.
pub fn validation_success_rate(
    runs: &[RunValidationCounts],
) -> Result<RateOverRuns, MetricsError> {
    let mut sum = 0.0;
    let mut eligible = 0u64;
    let mut excluded = 0u64;
    for run in runs {
        if run.submitted == 0 {
            excluded += 1;
            continue;
        }
        sum += run.passed as f64 / run.submitted as f64;
        eligible += 1;
    }
    if eligible == 0 {
        return Err(MetricsError::NoEligibleRuns);
    }
    Ok(RateOverRuns { mean_rate: sum / eligible as f64, eligible_runs: eligible, excluded_runs: excluded })
}

/// Execution success over attempted executions; skips are excluded from the
/// denominator but reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRate {
    pub rate: f64,
    pub successes: u64,
    pub failures: u64,
    pub skipped: u64,
}

pub fn execution_success_rate(statuses: &[ExecStatus]) -> Result<ExecutionRate, MetricsError> {
    let mut successes = 0u64;
    let mut failures = 0u64;
    let mut skipped = 0u64;
    for status in statuses {
        match status {
            ExecStatus::Success => successes += 1,
            ExecStatus::Failure => failures += 1,
            ExecStatus::SkippedResources => skipped += 1,
        }
    }
    let attempted = successes + failures;
    if attempted == 0 {
        return Err(MetricsError::NoExecutions);
    }
    Ok(ExecutionRate { rate: successes as f64 / attempted as f64, successes, failures, skipped })
}

/// A line the execution-log parser could not understand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line_no: usize,
    pub content: String,
    pub message: String,
}

/// Parse one dated execution log, separating good entries from bad lines.
pub fn parse_execution_log(
    path: &Path,
) -> Result<(Vec<ExecutionLogEntry>, Vec<MalformedLine>), MetricsError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(MetricsError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut entries = Vec::new();
    let mut malformed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match ExecutionLogEntry::parse_line(line) {
            Ok(entry) => entries.push(entry),
            Err(message) => malformed.push(MalformedLine {
                line_no: i + 1,
                content: line.to_string(),
                message,
            }),
        }
    }
    Ok((entries, malformed))
}

// ---------------------------------------------------------------------------
// Report document
// ---------------------------------------------------------------------------

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One step as reported for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStep {
    pub step: StepId,
    pub status: crate::pipeline::StepStatus,
    pub duration_s: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: u64,
    pub steps: Vec<ReportStep>,
    /// Steps that contributed no timing (skipped or failed before timing).
    pub absent_steps: Vec<StepId>,
    pub end_to_end_latency_s: f64,
    pub counts: FunnelCounts,
}

/// Mean-of-per-call rates and the pooled (total tokens / total time) rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePair {
    pub mean_of_rates: Option<f64>,
    pub pooled_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTokenRates {
    pub step: StepId,
    pub prompt: RatePair,
    pub completion: RatePair,
    /// Successful calls with reported token counts.
    pub calls: u64,
    /// Among those, calls whose duration fields were zero (excluded from the
    /// corresponding rate).
    pub zero_duration_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationEntry {
    pub model: String,
    pub step: StepId,
    pub property: ResourceProperty,
    /// Mean of per-run means.
    pub ru: f64,
    pub runs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub counts: FunnelCounts,
    pub reliability: Option<f64>,
    pub validation_success_rate: Option<RateOverRuns>,
    pub execution_success_rate: Option<ExecutionRate>,
    pub token_throughput: Vec<StepTokenRates>,
    pub resource_utilization: Vec<UtilizationEntry>,
}

/// The complete machine-readable report. Contains no wall-clock "generated
/// at" field: identical logs compile to identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    /// Latest run covered.
    pub run_id: u64,
    pub data_type: String,
    pub runs: Vec<RunReport>,
    pub aggregate: AggregateReport,
}

/// Everything the report compiler reads, already loaded from the logs.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub manifests: Vec<RunManifest>,
    pub exchanges: Vec<ExchangeRecord>,
    pub validations: Vec<RunValidationRecord>,
    pub exec_entries: Vec<ExecutionLogEntry>,
    pub step_samples: Vec<StepSampleRecord>,
}

/// Compile the report from the persisted logs.
pub fn compile_report(
    data_type: &str,
    inputs: &ReportInputs,
) -> Result<PipelineReport, MetricsError> {
    if inputs.manifests.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut manifests = inputs.manifests.clone();
    manifests.sort_by_key(|m| m.run_id);

    let mut runs = Vec::with_capacity(manifests.len());
    let mut aggregate_counts = FunnelCounts::default();
    for manifest in &manifests {
        let timings: Vec<StepTiming> =
            manifest.steps.iter().filter_map(|s| s.timing.clone()).collect();
        let (latency, absent) = end_to_end_latency(&timings);
        aggregate_counts.accumulate(&manifest.counts);
        runs.push(RunReport {
            run_id: manifest.run_id,
            steps: manifest
                .steps
                .iter()
                .map(|s| ReportStep {
                    step: s.step,
                    status: s.status,
                    duration_s: s.timing.as_ref().map(|t| t.duration_s),
                    failure: s.failure.clone(),
                })
                .collect(),
            absent_steps: absent,
            end_to_end_latency_s: latency,
            counts: manifest.counts,
        });
    }

    let statuses: Vec<ValidationStatus> =
        inputs.validations.iter().map(|v| v.record.status).collect();
    let reliability = reliability(&statuses).ok();

    let per_run: Vec<RunValidationCounts> = manifests
        .iter()
        .map(|m| RunValidationCounts {
            run_id: m.run_id,
            submitted: m.counts.reached_validator,
            passed: m.counts.passed_validation,
        })
        .collect();
    let validation_rate = validation_success_rate(&per_run).ok();

    let exec_statuses: Vec<ExecStatus> = inputs.exec_entries.iter().map(|e| e.status).collect();
    let execution_rate = execution_success_rate(&exec_statuses).ok();

    let token_throughput = token_throughput(&inputs.exchanges);
    let resource_utilization = resource_utilization(&inputs.step_samples);

    Ok(PipelineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: manifests.last().expect("non-empty").run_id,
        data_type: data_type.to_string(),
        runs,
        aggregate: AggregateReport {
            counts: aggregate_counts,
            reliability,
            validation_success_rate: validation_rate,
            execution_success_rate: execution_rate,
            token_throughput,
            resource_utilization,
        },
    })
}

fn token_throughput(exchanges: &[ExchangeRecord]) -> Vec<StepTokenRates> {
    struct Tally {
        prompt_rates: Vec<f64>,
        completion_rates: Vec<f64>,
        prompt_tokens: u64,
        prompt_ns: u64,
        completion_tokens: u64,
        completion_ns: u64,
        calls: u64,
        zero_duration_calls: u64,
    }
    let mut by_step: BTreeMap<u8, Tally> = BTreeMap::new();
    for exchange in exchanges {
        if exchange.outcome != ExchangeOutcome::Ok {
            continue;
        }
        let Some(usage) = &exchange.usage else { continue };
        if !usage.counts_reported {
            continue;
        }
        let tally = by_step.entry(exchange.step.index()).or_insert_with(|| Tally {
            prompt_rates: Vec::new(),
            completion_rates: Vec::new(),
            prompt_tokens: 0,
            prompt_ns: 0,
            completion_tokens: 0,
            completion_ns: 0,
            calls: 0,
            zero_duration_calls: 0,
        });
        tally.calls += 1;
        let prompt = prompt_tokens_per_second(usage);
        let completion = completion_tokens_per_second(usage);
        if prompt.is_none() || completion.is_none() {
            tally.zero_duration_calls += 1;
        }
        if let Some(rate) = prompt {
            tally.prompt_rates.push(rate);
            tally.prompt_tokens += usage.prompt_tokens;
            tally.prompt_ns += usage.prompt_eval_duration_ns;
        }
        if let Some(rate) = completion {
            tally.completion_rates.push(rate);
            tally.completion_tokens += usage.completion_tokens;
            tally.completion_ns += usage.eval_duration_ns;
        }
    }

    let mean = |rates: &[f64]| -> Option<f64> {
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    };
    let pooled = |tokens: u64, ns: u64| -> Option<f64> {
        if ns == 0 {
            None
        } else {
            Some(tokens as f64 / (ns as f64 / 1e9))
        }
    };

    by_step
        .into_iter()
        .map(|(index, tally)| StepTokenRates {
            step: StepId::ALL[(index - 1) as usize],
            prompt: RatePair {
                mean_of_rates: mean(&tally.prompt_rates),
                pooled_rate: pooled(tally.prompt_tokens, tally.prompt_ns),
            },
            completion: RatePair {
                mean_of_rates: mean(&tally.completion_rates),
                pooled_rate: pooled(tally.completion_tokens, tally.completion_ns),
            },
            calls: tally.calls,
            zero_duration_calls: tally.zero_duration_calls,
        })
        .collect()
}

fn resource_utilization(samples: &[StepSampleRecord]) -> Vec<UtilizationEntry> {
    // (model, step index, property) -> run_id -> values
    type GroupKey = (String, u8, ResourceProperty);
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for sample in samples {
        for (property, value) in [
            (ResourceProperty::CpuPct, sample.cpu_pct),
            (ResourceProperty::MemUsedPct, sample.mem_used_pct),
        ] {
            groups
                .entry((sample.model.clone(), sample.step.index(), property))
                .or_default()
                .entry(sample.run_id)
                .or_default()
                .push(value);
        }
    }
    groups
        .into_iter()
        .map(|((model, step_index, property), by_run)| {
            let run_means: Vec<f64> = by_run
                .values()
                .map(|values| values.iter().sum::<f64>() / values.len() as f64)
                .collect();
            UtilizationEntry {
                model,
                step: StepId::ALL[(step_index - 1) as usize],
                property,
                ru: run_means.iter().sum::<f64>() / run_means.len() as f64,
                runs: run_means.len() as u64,
            }
        })
        .collect()
}

/// Validate the report's internal invariants and write it atomically.
pub fn emit_report(report: &PipelineReport, path: &Path) -> Result<(), MetricsError> {
    let mut summed = FunnelCounts::default();
    for run in &report.runs {
        run.counts.check(&format!("run {}", run.run_id))?;
        summed.accumulate(&run.counts);
        let step_sum: f64 = run.steps.iter().filter_map(|s| s.duration_s).sum();
        if (run.end_to_end_latency_s - step_sum).abs() > 0.001 {
            return Err(MetricsError::InvariantViolation(format!(
                "run {}: end-to-end latency {} differs from step sum {}",
                run.run_id, run.end_to_end_latency_s, step_sum
            )));
        }
    }
    report.aggregate.counts.check("aggregate")?;
    if summed != report.aggregate.counts {
        return Err(MetricsError::InvariantViolation(
            "aggregate counts are not the sum of run counts".into(),
        ));
    }
    let mut rates: Vec<(&str, f64)> = Vec::new();
    if let Some(r) = report.aggregate.reliability {
        rates.push(("reliability", r));
    }
    if let Some(r) = &report.aggregate.validation_success_rate {
        rates.push(("validation_success_rate", r.mean_rate));
    }
    if let Some(r) = &report.aggregate.execution_success_rate {
        rates.push(("execution_success_rate", r.rate));
    }
    for (name, rate) in rates {
        if !(0.0..=1.0).contains(&rate) {
            return Err(MetricsError::InvariantViolation(format!(
                "{name} {rate} outside [0, 1]"
            )));
        }
    }
    crate::fsutil::atomic_write_json(path, report)?;
    Ok(())
}

/// Per-call token rate table as CSV, one row per exchange.
pub fn write_token_rate_csv(path: &Path, exchanges: &[ExchangeRecord]) -> Result<(), MetricsError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| MetricsError::Malformed(e.to_string()))?;
    writer
        .write_record([
            "run_id",
            "step",
            "batch",
            "attempt",
            "outcome",
            "prompt_tokens",
            "prompt_eval_duration_ns",
            "prompt_tps",
            "completion_tokens",
            "eval_duration_ns",
            "completion_tps",
        ])
        .map_err(|e| MetricsError::Malformed(e.to_string()))?;
    for exchange in exchanges {
        let outcome = match exchange.outcome {
            ExchangeOutcome::Ok => "ok",
            ExchangeOutcome::Timeout => "timeout",
            ExchangeOutcome::TransportError => "transport_error",
        };
        let batch = exchange.batch.map(|b| b.to_string()).unwrap_or_default();
        let (pt, pd, ptps, ct, cd, ctps) = match &exchange.usage {
            Some(usage) if usage.counts_reported => (
                usage.prompt_tokens.to_string(),
                usage.prompt_eval_duration_ns.to_string(),
                prompt_tokens_per_second(usage).map(|r| format!("{r:.6}")).unwrap_or_default(),
                usage.completion_tokens.to_string(),
                usage.eval_duration_ns.to_string(),
                completion_tokens_per_second(usage)
                    .map(|r| format!("{r:.6}"))
                    .unwrap_or_default(),
            ),
            _ => Default::default(),
        };
        writer
            .write_record([
                exchange.run_id.to_string(),
                exchange.step.to_string(),
                batch,
                exchange.attempt.to_string(),
                outcome.to_string(),
                pt,
                pd,
                ptps,
                ct,
                cd,
                ctps,
            ])
            .map_err(|e| MetricsError::Malformed(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}
