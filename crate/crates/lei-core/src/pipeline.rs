//! The four-step orchestrator: propose tasks, generate scripts in batches,
//! validate with bounded repair, then execute under the resource gate. Each
//! run appends a manifest and recompiles the report from the full logs; a
//! failed step halts the run (later steps are skipped) without poisoning the
//! ledgers.

use crate::clock::{ts_serde, Clock};
use crate::code_generator::{
    generate_code_batch, partition_batches, persist_scripts, record_failures, script_path,
    GeneratedScript, GenerationFailure, ScriptOrigin,
};
use crate::config::{ConfigError, DomainPaths, PipelineConfig};
use crate::fsutil;
use crate::ingestion::{load_domain_bundle, IngestError};
use crate::llm_client::{
    invoke_logged, CallTag, ExchangeLog, ExchangeOutcome, FixtureBackend, HttpBackend, LlmBackend,
    LlmClientError,
};
use crate::metrics::{
    compile_report, emit_report, write_token_rate_csv, FunnelCounts, MetricsError, PipelineReport,
    ReportInputs, StepTiming,
};
use crate::resource_monitor::{
    read_summary, BackgroundMonitor, Monitor, MonitorError, OsProbe, ResourceProbe,
    ResourceSummary, SUMMARY_FILE,
};
use crate::sandbox::Sandbox;
use crate::scheduler::{
    append_log, execute_validated, publish_outputs, ExecStatus, ExecutionRecord,
    HeadroomThresholds,
};
use crate::step::StepId;
use crate::task_generator::{
    aggregate_instruction, merge_tasks, parse_task_response, template::PromptTemplate,
    TaskGenError, TaskList, TaskSpec, TemplateError, TemplateKind,
};
use crate::validator::{
    validate_all, write_validator_summary, Repository, ValidationOutcome, ValidationRecord,
    ValidatorError, VALIDATOR_SUMMARY_FILE,
};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

/// Run manifest ledger under the logs root.
pub const PIPELINE_RUNS_FILE: &str = "pipeline_runs.jsonl";
/// Per-script validation ledger under the logs root.
pub const VALIDATION_RECORDS_FILE: &str = "validation_records.jsonl";
/// Monotonic run counter file under the logs root.
pub const RUN_COUNTER_FILE: &str = "run_counter";
/// Per-call token rate table, written next to the report.
pub const TOKEN_RATES_FILE: &str = "token_rates.csv";
/// Default report file name in the results directory.
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Llm(#[from] LlmClientError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Ok,
    Failed,
    Skipped,
}

/// One step's entry in a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: StepId,
    pub status: StepStatus,
    /// Absent for skipped steps.
    pub timing: Option<StepTiming>,
    pub failure: Option<String>,
}

/// Appended to the run ledger after every run, halted or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: u64,
    pub data_type: String,
    pub model_id: String,
    #[serde(with = "ts_serde")]
    pub started_at: DateTime<Utc>,
    /// All four steps, in order.
    pub steps: Vec<StepEntry>,
    pub counts: FunnelCounts,
    /// File names (not paths) of artifacts this run wrote.
    pub artifacts: Vec<String>,
}

/// Validation ledger line: a validation record tagged with its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunValidationRecord {
    pub run_id: u64,
    #[serde(flatten)]
    pub record: ValidationRecord,
}

/// How resource sampling happens during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MonitorMode {
    /// A background thread ticks on the sampling interval (production).
    #[default]
    Background,
    /// Ticks happen synchronously at step boundaries and before each
    /// scheduled script (deterministic; used by tests and the CLI test flags).
    StepTicks,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub monitor_mode: MonitorMode,
    /// Overrides the default `report.json` location in the results directory.
    pub report_out: Option<PathBuf>,
}

/// What one `run()` produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: PipelineReport,
    pub report_path: PathBuf,
    /// True when a step failed and the rest of the run was skipped.
    pub halted: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.halted {
            2
        } else {
            0
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    paths: DomainPaths,
    clock: Arc<dyn Clock>,
    backend: Box<dyn LlmBackend>,
    monitor: Arc<Monitor>,
    options: PipelineOptions,
    xlog: ExchangeLog,
    sandbox: Sandbox,
}

impl Pipeline {
    /// Wire up a pipeline. `backend`/`probe` default from the config when not
    /// injected (tests inject shared fixture handles and scripted probes).
    pub fn new(
        cfg: PipelineConfig,
        clock: Arc<dyn Clock>,
        backend: Option<Box<dyn LlmBackend>>,
        probe: Option<Box<dyn ResourceProbe>>,
        options: PipelineOptions,
    ) -> Result<Self, PipelineError> {
        let paths = crate::config::resolve_domain_paths(&cfg)?;
        std::fs::create_dir_all(&paths.scripts_dir)?;
        std::fs::create_dir_all(&paths.summaries_dir)?;
        std::fs::create_dir_all(&cfg.logs_root)?;

        let backend: Box<dyn LlmBackend> = match backend {
            Some(b) => b,
            None => match cfg.backend.mode {
                crate::config::BackendMode::Live => {
                    Box::new(HttpBackend::new(&cfg.backend.base_url, &cfg.backend.model_id))
                }
                crate::config::BackendMode::Fixture => {
                    let dir = cfg
                        .backend
                        .fixture_dir
                        .as_ref()
                        .expect("fixture mode validated to carry a directory");
                    Box::new(FixtureBackend::load(dir)?)
                }
            },
        };
        let probe = probe.unwrap_or_else(|| Box::new(OsProbe::new()));
        let monitor = Arc::new(Monitor::new(
            probe,
            paths.summaries_dir.join(SUMMARY_FILE),
            &cfg.logs_root,
            &cfg.backend.model_id,
            &cfg.windows_min,
            cfg.sampling_interval_s,
        ));
        let xlog = ExchangeLog::new(&cfg.logs_root);
        let sandbox = Sandbox::new(
            &cfg.script_runtime_cmd,
            Duration::from_secs(cfg.validation_exec_timeout_s),
        );
        Ok(Pipeline { cfg, paths, clock, backend, monitor, options, xlog, sandbox })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    fn llm_timeout(&self) -> Duration {
        Duration::from_secs(self.cfg.llm_call_timeout_s)
    }

    fn limits(&self) -> HeadroomThresholds {
        HeadroomThresholds {
            cpu_max_pct: self.cfg.cpu_max_pct,
            mem_min_available_mb: self.cfg.mem_min_available_mb,
            sampling_interval_s: self.cfg.sampling_interval_s,
        }
    }

    fn next_run_id(&self) -> Result<u64, PipelineError> {
        let path = self.cfg.logs_root.join(RUN_COUNTER_FILE);
        let previous: u64 = match std::fs::read_to_string(&path) {
            Ok(text) => text.trim().parse().unwrap_or(0),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let next = previous + 1;
        fsutil::atomic_write(&path, format!("{next}\n").as_bytes())?;
        Ok(next)
    }

    /// Execute one full pipeline run. A failed step halts the run (remaining
    /// steps are marked skipped); the manifest is appended and the report
    /// recompiled either way.
    pub fn run(&mut self) -> Result<RunOutcome, PipelineError> {
        let run_id = self.next_run_id()?;
        let started_at = self.clock.now();
        let mut steps: Vec<StepEntry> = Vec::new();
        let mut counts = FunnelCounts::default();
        let mut artifacts: Vec<String> = Vec::new();
        let mut halted = false;

        let background = match self.options.monitor_mode {
            MonitorMode::Background => Some(BackgroundMonitor::start(
                Arc::clone(&self.monitor),
                Arc::clone(&self.clock),
                Duration::from_secs(self.cfg.sampling_interval_s),
            )?),
            MonitorMode::StepTicks => None,
        };

        // -- Step 1: task generation --------------------------------------
        let mut added: Vec<TaskSpec> = Vec::new();
        {
            self.monitor.begin_step(run_id, StepId::TaskGen);
            if self.options.monitor_mode == MonitorMode::StepTicks {
                self.monitor.tick(self.clock.as_ref())?;
            }
            let start = self.clock.now();
            let result = self.do_task_gen(run_id);
            let timing = StepTiming::new(StepId::TaskGen, start, self.clock.now());
            self.monitor.end_step();
            match result {
                Ok(outcome) => {
                    counts.tasks_proposed = outcome.added.len() as u64;
                    added = outcome.added;
                    artifacts.push("tasks_list.json".into());
                    artifacts.push("new_tasks.json".into());
                    steps.push(StepEntry {
                        step: StepId::TaskGen,
                        status: StepStatus::Ok,
                        timing: Some(timing),
                        failure: None,
                    });
                }
                Err(reason) => {
                    halted = true;
                    steps.push(StepEntry {
                        step: StepId::TaskGen,
                        status: StepStatus::Failed,
                        timing: Some(timing),
                        failure: Some(reason),
                    });
                }
            }
        }

        // -- Step 2: code generation --------------------------------------
        let mut scripts: Vec<GeneratedScript> = Vec::new();
        if halted {
            steps.push(skipped(StepId::CodeGen));
        } else {
            self.monitor.begin_step(run_id, StepId::CodeGen);
            if self.options.monitor_mode == MonitorMode::StepTicks {
                self.monitor.tick(self.clock.as_ref())?;
            }
            let start = self.clock.now();
            let result = self.do_code_gen(run_id, &added);
            let timing = StepTiming::new(StepId::CodeGen, start, self.clock.now());
            self.monitor.end_step();
            match result {
                Ok(outcome) => {
                    counts.scripts_generated = outcome.scripts.len() as u64;
                    counts.reached_validator = outcome.scripts.len() as u64;
                    scripts = outcome.scripts;
                    steps.push(StepEntry {
                        step: StepId::CodeGen,
                        status: StepStatus::Ok,
                        timing: Some(timing),
                        failure: None,
                    });
                }
                Err(reason) => {
                    halted = true;
                    steps.push(StepEntry {
                        step: StepId::CodeGen,
                        status: StepStatus::Failed,
                        timing: Some(timing),
                        failure: Some(reason),
                    });
                }
            }
        }

        // -- Step 3: validation with bounded repair ------------------------
        let mut passed: Vec<GeneratedScript> = Vec::new();
        if halted {
            steps.push(skipped(StepId::Validate));
        } else {
            self.monitor.begin_step(run_id, StepId::Validate);
            if self.options.monitor_mode == MonitorMode::StepTicks {
                self.monitor.tick(self.clock.as_ref())?;
            }
            let start = self.clock.now();
            let result = self.do_validate(run_id, std::mem::take(&mut scripts));
            let timing = StepTiming::new(StepId::Validate, start, self.clock.now());
            self.monitor.end_step();
            match result {
                Ok(outcome) => {
                    counts.passed_validation = outcome.passed.len() as u64;
                    counts.failed_validation =
                        outcome.records.len() as u64 - outcome.passed.len() as u64;
                    passed = outcome.passed;
                    artifacts.push(VALIDATOR_SUMMARY_FILE.into());
                    steps.push(StepEntry {
                        step: StepId::Validate,
                        status: StepStatus::Ok,
                        timing: Some(timing),
                        failure: None,
                    });
                }
                Err(reason) => {
                    halted = true;
                    steps.push(StepEntry {
                        step: StepId::Validate,
                        status: StepStatus::Failed,
                        timing: Some(timing),
                        failure: Some(reason),
                    });
                }
            }
        }

        // -- Step 4: resource-gated execution of this run's validated set --
        if halted {
            steps.push(skipped(StepId::Execute));
        } else {
            self.monitor.begin_step(run_id, StepId::Execute);
            if self.options.monitor_mode == MonitorMode::StepTicks {
                self.monitor.tick(self.clock.as_ref())?;
            }
            let start = self.clock.now();
            let entries: Vec<(String, PathBuf)> = {
                let repo = Repository::open(&self.paths.repository_dir)?;
                let mut names: Vec<&str> = passed.iter().map(|s| s.task_name.as_str()).collect();
                names.sort_unstable();
                repo.entries()
                    .into_iter()
                    .filter(|(name, _)| names.binary_search(&name.as_str()).is_ok())
                    .collect()
            };
            counts.reached_step4 = entries.len() as u64;
            let result = self.do_execute(run_id, &entries);
            let timing = StepTiming::new(StepId::Execute, start, self.clock.now());
            self.monitor.end_step();
            match result {
                Ok(records) => {
                    counts.executed_ok =
                        records.iter().filter(|r| r.status == ExecStatus::Success).count() as u64;
                    artifacts.push(format!("results_{run_id}.json"));
                    steps.push(StepEntry {
                        step: StepId::Execute,
                        status: StepStatus::Ok,
                        timing: Some(timing),
                        failure: None,
                    });
                }
                Err(reason) => {
                    halted = true;
                    counts.reached_step4 = 0;
                    steps.push(StepEntry {
                        step: StepId::Execute,
                        status: StepStatus::Failed,
                        timing: Some(timing),
                        failure: Some(reason),
                    });
                }
            }
        }

        if let Some(bg) = background {
            bg.stop();
        }

        artifacts.push(REPORT_FILE.into());
        artifacts.push(TOKEN_RATES_FILE.into());
        let manifest = RunManifest {
            run_id,
            data_type: self.cfg.data_type.clone(),
            model_id: self.cfg.backend.model_id.clone(),
            started_at,
            steps,
            counts,
            artifacts,
        };
        fsutil::append_line(
            &self.cfg.logs_root.join(PIPELINE_RUNS_FILE),
            &serde_json::to_string(&manifest)?,
        )?;

        let (report, report_path) = self.compile_and_emit()?;
        Ok(RunOutcome { manifest, report, report_path, halted })
    }

    // -- step bodies --------------------------------------------------------

    fn do_task_gen(&mut self, run_id: u64) -> Result<TaskGenOutcome, String> {
        let bundle = load_domain_bundle(
            &self.paths.sample,
            &self.paths.metadata,
            &self.paths.context,
            &self.paths.tasks_list,
        )
        .map_err(|e| e.to_string())?;
        let template = PromptTemplate::load(&self.cfg.prompts_root, TemplateKind::TaskGeneration)
            .map_err(|e| e.to_string())?;
        let summary =
            self.monitor.latest_summary(self.clock.now()).map_err(|e| e.to_string())?;
        let instruction =
            aggregate_instruction(&bundle, &summary, &template).map_err(|e| e.to_string())?;

        let tag = CallTag { step: StepId::TaskGen, batch: None, attempt: 0 };
        let timeout = self.llm_timeout();
        let exchange = invoke_logged(
            self.backend.as_mut(),
            &self.xlog,
            run_id,
            &tag,
            &instruction,
            timeout,
            self.clock.as_ref(),
        )
        .map_err(|e| e.to_string())?;
        if !exchange.is_ok() {
            return Err(exchange_failure(&exchange));
        }

        let parse = parse_task_response(exchange.response.as_deref().unwrap_or(""))
            .map_err(|e| e.to_string())?;
        let outcome = merge_tasks(&bundle.previous_tasks, &parse.tasks);
        outcome.merged.save(&self.paths.tasks_list).map_err(|e| e.to_string())?;
        TaskList(outcome.added.clone())
            .save(&self.paths.new_tasks)
            .map_err(|e| e.to_string())?;
        Ok(TaskGenOutcome { added: outcome.added, merged_total: outcome.merged.len() })
    }

    fn do_code_gen(&mut self, run_id: u64, tasks: &[TaskSpec]) -> Result<CodeGenOutcome, String> {
        if tasks.is_empty() {
            return Ok(CodeGenOutcome { scripts: Vec::new(), failures: 0 });
        }
        let template = PromptTemplate::load(&self.cfg.prompts_root, TemplateKind::CodeGeneration)
            .map_err(|e| e.to_string())?;
        let sample_csv =
            std::fs::read_to_string(&self.paths.sample).map_err(|e| e.to_string())?;
        let plan = partition_batches(tasks, self.cfg.batch_size_k);
        let timeout = self.llm_timeout();

        let mut scripts = Vec::new();
        let mut failures: Vec<GenerationFailure> = Vec::new();
        for (index, batch) in plan.batches.iter().enumerate() {
            let outcome = generate_code_batch(
                self.backend.as_mut(),
                &self.xlog,
                run_id,
                index as u32,
                batch,
                &sample_csv,
                &template,
                timeout,
                self.clock.as_ref(),
                &self.paths.scripts_dir,
                &self.cfg.script_extension,
            )
            .map_err(|e| e.to_string())?;
            scripts.extend(outcome.scripts);
            failures.extend(outcome.failures);
        }
        let scripts = persist_scripts(scripts).map_err(|e| e.to_string())?;
        record_failures(&self.cfg.logs_root, &failures).map_err(|e| e.to_string())?;
        if scripts.is_empty() {
            return Err(format!(
                "no scripts produced for {} tasks ({} failures recorded)",
                tasks.len(),
                failures.len()
            ));
        }
        Ok(CodeGenOutcome { scripts, failures: failures.len() })
    }

    fn do_validate(
        &mut self,
        run_id: u64,
        scripts: Vec<GeneratedScript>,
    ) -> Result<ValidationOutcome, String> {
        if scripts.is_empty() {
            return Ok(ValidationOutcome { records: Vec::new(), passed: Vec::new() });
        }
        let fix_template = PromptTemplate::load(&self.cfg.prompts_root, TemplateKind::ValidationFix)
            .map_err(|e| e.to_string())?;
        let tasks = if self.paths.tasks_list.is_file() {
            TaskList::load(&self.paths.tasks_list).map_err(|e| e.to_string())?
        } else {
            TaskList::default()
        };
        let timeout = self.llm_timeout();
        let max_fix_attempts = self.cfg.max_fix_attempts;
        let outcome = validate_all(
            scripts,
            &self.paths.sample,
            &self.sandbox,
            self.backend.as_mut(),
            &self.xlog,
            run_id,
            &fix_template,
            &tasks,
            max_fix_attempts,
            timeout,
            self.clock.as_ref(),
        )
        .map_err(|e| e.to_string())?;

        write_validator_summary(
            &self.paths.summaries_dir.join(VALIDATOR_SUMMARY_FILE),
            &outcome.records,
        )
        .map_err(|e| e.to_string())?;
        let ledger = self.cfg.logs_root.join(VALIDATION_RECORDS_FILE);
        for record in &outcome.records {
            let line = serde_json::to_string(&RunValidationRecord {
                run_id,
                record: record.clone(),
            })
            .map_err(|e| e.to_string())?;
            fsutil::append_line(&ledger, &line).map_err(|e| e.to_string())?;
        }

        let mut repo = Repository::open(&self.paths.repository_dir).map_err(|e| e.to_string())?;
        for script in &outcome.passed {
            repo.admit(script, self.clock.as_ref()).map_err(|e| e.to_string())?;
        }
        Ok(outcome)
    }

    fn do_execute(
        &mut self,
        run_id: u64,
        entries: &[(String, PathBuf)],
    ) -> Result<Vec<ExecutionRecord>, String> {
        // Run against the raw store when it exists, otherwise the sample.
        let data = if self.paths.raw_data.is_file() {
            self.paths.raw_data.clone()
        } else {
            self.paths.sample.clone()
        };
        let monitor = Arc::clone(&self.monitor);
        let clock = Arc::clone(&self.clock);
        let mode = self.options.monitor_mode;
        let mut headroom = move || -> Result<ResourceSummary, MonitorError> {
            match mode {
                MonitorMode::StepTicks => {
                    monitor.tick(clock.as_ref())?;
                    monitor.latest_summary(clock.now())
                }
                MonitorMode::Background => read_summary(monitor.summary_path()),
            }
        };
        let records = execute_validated(
            entries,
            &data,
            &self.sandbox,
            &mut headroom,
            &self.limits(),
            self.clock.as_ref(),
            run_id,
        );
        for record in &records {
            append_log(&self.cfg.logs_root, record).map_err(|e| e.to_string())?;
        }
        publish_outputs(&self.paths.results_dir, run_id, &records).map_err(|e| e.to_string())?;
        Ok(records)
    }

    fn compile_and_emit(&self) -> Result<(PipelineReport, PathBuf), PipelineError> {
        let inputs = gather_inputs(&self.cfg.logs_root)?;
        let report = compile_report(&self.cfg.data_type, &inputs)?;
        let report_path = self
            .options
            .report_out
            .clone()
            .unwrap_or_else(|| self.paths.results_dir.join(REPORT_FILE));
        emit_report(&report, &report_path)?;
        write_token_rate_csv(&self.paths.results_dir.join(TOKEN_RATES_FILE), &inputs.exchanges)?;
        Ok((report, report_path))
    }

    // -- standalone operations (no manifest appended) -------------------------

    /// Run only step 1. Uses run id 0 in the exchange ledger.
    pub fn task_gen_once(&mut self) -> Result<TaskGenOutcome, PipelineError> {
        self.monitor.tick(self.clock.as_ref())?;
        self.do_task_gen(0).map_err(|reason| step_error(StepId::TaskGen, reason))
    }

    /// Run only step 2, over the latest proposals (`new_tasks.json`) when
    /// present, otherwise the whole task list.
    pub fn code_gen_once(&mut self) -> Result<CodeGenOutcome, PipelineError> {
        let source = if self.paths.new_tasks.is_file() {
            &self.paths.new_tasks
        } else {
            &self.paths.tasks_list
        };
        let tasks = TaskList::load(source)?;
        self.do_code_gen(0, &tasks.0).map_err(|reason| step_error(StepId::CodeGen, reason))
    }

    /// Run only step 3, over every task in the list that has a script file.
    pub fn validate_once(&mut self) -> Result<ValidationOutcome, PipelineError> {
        let tasks = TaskList::load(&self.paths.tasks_list)?;
        let mut scripts = Vec::new();
        for task in tasks.iter() {
            let path =
                script_path(&self.paths.scripts_dir, &task.name, &self.cfg.script_extension);
            if path.is_file() {
                scripts.push(GeneratedScript {
                    task_name: task.name.clone(),
                    source: std::fs::read_to_string(&path)?,
                    origin: ScriptOrigin::Generated,
                    created_at: self.clock.now(),
                    path,
                });
            }
        }
        self.do_validate(0, scripts).map_err(|reason| step_error(StepId::Validate, reason))
    }

    /// Run only step 4, over the full validated-script repository.
    pub fn execute_once(&mut self) -> Result<Vec<ExecutionRecord>, PipelineError> {
        self.monitor.tick(self.clock.as_ref())?;
        let repo = Repository::open(&self.paths.repository_dir)?;
        let entries = repo.entries();
        self.do_execute(0, &entries).map_err(|reason| step_error(StepId::Execute, reason))
    }

    /// Recompile and rewrite the report from the logs without running anything.
    pub fn report_only(&self) -> Result<(PipelineReport, PathBuf), PipelineError> {
        self.compile_and_emit()
    }

    /// One monitor tick (used by the `monitor` subcommand).
    pub fn monitor_tick(&self) -> Result<crate::resource_monitor::ResourceSample, PipelineError> {
        Ok(self.monitor.tick(self.clock.as_ref())?)
    }

    pub fn summary_path(&self) -> PathBuf {
        self.monitor.summary_path().to_path_buf()
    }

    pub fn domain_paths(&self) -> &DomainPaths {
        &self.paths
    }
}

fn skipped(step: StepId) -> StepEntry {
    StepEntry { step, status: StepStatus::Skipped, timing: None, failure: None }
}

fn exchange_failure(exchange: &crate::llm_client::LlmExchange) -> String {
    match exchange.outcome {
        ExchangeOutcome::Timeout => "llm_timeout".to_string(),
        _ => format!(
            "llm_transport_error: {}",
            exchange.error_detail.as_deref().unwrap_or("unknown")
        ),
    }
}

fn step_error(step: StepId, reason: String) -> PipelineError {
    PipelineError::Io(std::io::Error::other(format!("step {step} failed: {reason}")))
}

#[derive(Debug, Clone)]
pub struct TaskGenOutcome {
    pub added: Vec<TaskSpec>,
    pub merged_total: usize,
}

#[derive(Debug, Clone)]
pub struct CodeGenOutcome {
    pub scripts: Vec<GeneratedScript>,
    pub failures: usize,
}

/// Load every ledger the report compiler reads. Absent files read as empty.
pub fn gather_inputs(logs_root: &std::path::Path) -> Result<ReportInputs, PipelineError> {
    let manifests: Vec<RunManifest> = fsutil::read_jsonl(&logs_root.join(PIPELINE_RUNS_FILE))?;
    let exchanges = ExchangeLog::new(logs_root).read_all()?;
    let validations: Vec<RunValidationRecord> =
        fsutil::read_jsonl(&logs_root.join(VALIDATION_RECORDS_FILE))?;
    let step_samples = fsutil::read_jsonl(
        &logs_root.join(crate::resource_monitor::RESOURCE_SAMPLES_FILE),
    )?;

    let mut exec_entries = Vec::new();
    if logs_root.is_dir() {
        let mut log_files: Vec<PathBuf> = std::fs::read_dir(logs_root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("edge_execution_") && n.ends_with(".log"))
            })
            .collect();
        log_files.sort();
        for path in log_files {
            let (entries, malformed) = crate::metrics::parse_execution_log(&path)?;
            for bad in &malformed {
                log::warn!(
                    "skipping malformed execution log line {}:{} ({})",
                    path.display(),
                    bad.line_no,
                    bad.message
                );
            }
            exec_entries.extend(entries);
        }
    }
    Ok(ReportInputs { manifests, exchanges, validations, exec_entries, step_samples })
}
