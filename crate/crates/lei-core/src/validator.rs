//! Step 3: run each generated script against the sample data in the sandbox,
//! repair failures through a bounded fix loop with the model, and admit
//! passing scripts into the validated-script repository.

use crate::clock::{seconds_between, ts_serde, Clock};
use crate::code_generator::{normalize_source, persist_scripts, GeneratedScript, ScriptOrigin};
use crate::fsutil;
use crate::llm_client::{invoke_logged, CallTag, ExchangeLog, ExchangeOutcome, LlmBackend};
use crate::sandbox::{Sandbox, SandboxExit, SandboxResult};
use crate::step::StepId;
use crate::task_generator::{template::PromptTemplate, TaskList, TemplateKind};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

/// Per-run validator summary file name, written under the summaries dir.
pub const VALIDATOR_SUMMARY_FILE: &str = "validator_summary.json";

#[derive(Debug, Error)]
pub enum ValidatorError {
    #[error("malformed validator summary in {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a script ended up after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    /// Passed on the first execution, no repair needed.
    PassedInitial,
    /// Passed after at least one repair attempt.
    PassedAfterFix,
    /// Still failing when the attempt budget ran out.
    Failed,
}

/// Clock-observed durations accumulated while validating one script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationDurations {
    /// One entry per sandbox execution (initial plus each re-check).
    pub exec: Vec<f64>,
    /// One entry per repair call to the model.
    pub llm_fix: Vec<f64>,
}

/// The validation verdict for one script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub task_name: String,
    pub status: ValidationStatus,
    /// Repair attempts consumed; zero for `PassedInitial`, always the full
    /// budget for `Failed`.
    pub attempts_used: u32,
    pub last_error: Option<String>,
    pub durations_s: ValidationDurations,
}

/// Records plus the scripts that passed (with on-disk sources).
#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub records: Vec<ValidationRecord>,
    pub passed: Vec<GeneratedScript>,
}

/// Human-readable reason a sandbox run did not count as a pass.
pub fn failure_message(result: &SandboxResult, timeout: Duration) -> String {
    match result.exit {
        SandboxExit::TimedOut => format!("timeout after {}s", timeout.as_secs()),
        SandboxExit::NonZero(code) => {
            let tail: String = {
                let t = result.stderr.trim();
                let start = t.len().saturating_sub(500);
                t[start..].to_string()
            };
            format!("exit {code}: {tail}")
        }
        SandboxExit::SpawnError => format!(
            "spawn failure: {}",
            result.spawn_error.as_deref().unwrap_or("unknown")
        ),
        SandboxExit::Success => {
            let prefix: String = result.stdout.trim().chars().take(200).collect();
            format!("stdout is not valid JSON: {prefix}")
        }
    }
}

fn passes(result: &SandboxResult) -> bool {
    result.succeeded() && result.parsed_output.is_some()
}

/// Validate every script: execute, and on failure loop up to
/// `max_fix_attempts` times asking the model for a corrected source, which is
/// persisted (overwriting) and re-executed. A failed model call consumes an
/// attempt. Nothing aborts the batch — each script gets its own record.
#[allow(clippy::too_many_arguments)]
pub fn validate_all(
    scripts: Vec<GeneratedScript>,
    sample: &Path,
    sandbox: &Sandbox,
    backend: &mut dyn LlmBackend,
    xlog: &ExchangeLog,
    run_id: u64,
    fix_template: &PromptTemplate,
    tasks: &TaskList,
    max_fix_attempts: u32,
    llm_timeout: Duration,
    clock: &dyn Clock,
) -> std::io::Result<ValidationOutcome> {
    assert_eq!(fix_template.kind(), TemplateKind::ValidationFix, "wrong template kind");
    let descriptions: BTreeMap<&str, &str> =
        tasks.iter().map(|t| (t.name.as_str(), t.description.as_str())).collect();

    let mut records = Vec::with_capacity(scripts.len());
    let mut passed = Vec::new();
    for (script_idx, mut script) in scripts.into_iter().enumerate() {
        let mut durations = ValidationDurations::default();
        let exec = |script_path: &Path, durations: &mut ValidationDurations| {
            let started = clock.now();
            let result = sandbox.run_script(script_path, sample);
            durations.exec.push(seconds_between(started, clock.now()));
            result
        };

        let first = exec(&script.path, &mut durations);
        if passes(&first) {
            records.push(ValidationRecord {
                task_name: script.task_name.clone(),
                status: ValidationStatus::PassedInitial,
                attempts_used: 0,
                last_error: None,
                durations_s: durations,
            });
            passed.push(script);
            continue;
        }

        let mut last_error = failure_message(&first, sandbox.timeout());
        let mut verdict = None;
        for attempt in 1..=max_fix_attempts {
            let description = descriptions.get(script.task_name.as_str()).copied().unwrap_or("");
            let mut sections = BTreeMap::new();
            sections.insert("task_name", script.task_name.clone());
            sections.insert("description", description.to_string());
            sections.insert("source", script.source.clone());
            sections.insert("error", last_error.clone());
            let instruction = fix_template.render(&sections);

            let tag =
                CallTag { step: StepId::Validate, batch: Some(script_idx as u32), attempt };
            let exchange =
                invoke_logged(backend, xlog, run_id, &tag, &instruction, llm_timeout, clock)?;
            durations.llm_fix.push(exchange.wall_duration_s);

            if !exchange.is_ok() {
                last_error = match exchange.outcome {
                    ExchangeOutcome::Timeout => "llm_timeout".to_string(),
                    _ => format!(
                        "llm_transport_error: {}",
                        exchange.error_detail.as_deref().unwrap_or("unknown")
                    ),
                };
                continue;
            }

            // Fix replies are the corrected source itself (possibly fenced),
            // not JSON.
            let repaired = match normalize_source(exchange.response.as_deref().unwrap_or("")) {
                Ok(source) => source,
                Err(_) => {
                    last_error = "empty_fix_response".to_string();
                    continue;
                }
            };
            script.source = repaired;
            script.origin = ScriptOrigin::Regenerated { attempt };
            script = persist_scripts(vec![script])?.remove(0);

            let recheck = exec(&script.path, &mut durations);
            if passes(&recheck) {
                verdict = Some((ValidationStatus::PassedAfterFix, attempt));
                break;
            }
            last_error = failure_message(&recheck, sandbox.timeout());
        }

        match verdict {
            Some((status, attempts_used)) => {
                records.push(ValidationRecord {
                    task_name: script.task_name.clone(),
                    status,
                    attempts_used,
                    last_error: None,
                    durations_s: durations,
                });
                passed.push(script);
            }
            None => records.push(ValidationRecord {
                task_name: script.task_name.clone(),
                status: ValidationStatus::Failed,
                attempts_used: max_fix_attempts,
                last_error: Some(last_error),
                durations_s: durations,
            }),
        }
    }
    Ok(ValidationOutcome { records, passed })
}

pub fn write_validator_summary(
    path: &Path,
    records: &[ValidationRecord],
) -> Result<(), ValidatorError> {
    fsutil::atomic_write_json(path, &records)?;
    Ok(())
}

pub fn read_validator_summary(path: &Path) -> Result<Vec<ValidationRecord>, ValidatorError> {
    fsutil::read_json(path).map_err(|e| ValidatorError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Validated-script repository
// ---------------------------------------------------------------------------

/// Index entry for one validated script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoEntry {
    /// File name relative to the repository directory.
    pub script: String,
    #[serde(with = "ts_serde")]
    pub validated_at: DateTime<Utc>,
    pub sha256: String,
}

/// Directory of validated scripts plus an index keyed by task name. Admission
/// is idempotent by content hash: re-admitting an unchanged script does not
/// bump its timestamp.
pub struct Repository {
    dir: PathBuf,
    index_path: PathBuf,
    index: BTreeMap<String, RepoEntry>,
}

impl Repository {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        let index_path = dir.join("index.json");
        let index = if index_path.is_file() {
            fsutil::read_json(&index_path)?
        } else {
            BTreeMap::new()
        };
        Ok(Repository { dir: dir.to_path_buf(), index_path, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, task_name: &str) -> bool {
        self.index.contains_key(task_name)
    }

    /// `(task_name, absolute script path)` for every validated script, in
    /// task-name order.
    pub fn entries(&self) -> Vec<(String, PathBuf)> {
        self.index
            .iter()
            .map(|(name, entry)| (name.clone(), self.dir.join(&entry.script)))
            .collect()
    }

    /// Store a validated script. Returns true when the repository changed
    /// (new task or new content), false for a byte-identical re-admission.
    pub fn admit(&mut self, script: &GeneratedScript, clock: &dyn Clock) -> std::io::Result<bool> {
        let digest = crate::llm_client::sha256_hex(script.source.as_bytes());
        if let Some(existing) = self.index.get(&script.task_name) {
            if existing.sha256 == digest {
                return Ok(false);
            }
        }
        let extension = script
            .path
            .extension()
            .map(|e| format!(".{}", e.to_string_lossy()))
            .unwrap_or_default();
        let file_name = format!("{}{}", script.task_name, extension);
        fsutil::atomic_write(&self.dir.join(&file_name), script.source.as_bytes())?;
        self.index.insert(
            script.task_name.clone(),
            RepoEntry { script: file_name, validated_at: clock.now(), sha256: digest },
        );
        fsutil::atomic_write_json(&self.index_path, &self.index)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::TestClock;
    use crate::llm_client::FixtureBackend;
    use crate::task_generator::TaskSpec;
    use chrono::TimeZone;
    use serde_json::json;

    const GOOD: &str = "import json, sys\nprint(json.dumps({\"ok\": True and 1}))\n";
    const BAD: &str = "raise SystemExit(3)\n";
    const NON_JSON: &str = "print('not json')\n";

    struct Ctx {
        scripts_dir: tempfile::TempDir,
        sample: PathBuf,
        sandbox: Sandbox,
        backend: FixtureBackend,
        xlog_dir: tempfile::TempDir,
        fix_template: PromptTemplate,
        tasks: TaskList,
        clock: TestClock,
        _fixture_dir: tempfile::TempDir,
    }

    fn ctx(fix_responses: &[&str]) -> Ctx {
        let scripts_dir = tempfile::tempdir().unwrap();
        let sample = scripts_dir.path().join("sample.csv");
        std::fs::write(&sample, "timestamp,v\n2025-10-28T17:00:00Z,1\n").unwrap();

        let fixture_dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for (i, body) in fix_responses.iter().enumerate() {
            let name = format!("fix{i}.txt");
            std::fs::write(fixture_dir.path().join(&name), body).unwrap();
            entries.push(json!({"step": "validate", "response_file": name, "uses": 1}));
        }
        std::fs::write(
            fixture_dir.path().join("manifest.json"),
            serde_json::to_string(&json!({"entries": entries})).unwrap(),
        )
        .unwrap();
        let backend = FixtureBackend::load(fixture_dir.path()).unwrap();

        let prompts = tempfile::tempdir().unwrap();
        std::fs::write(
            prompts.path().join(TemplateKind::ValidationFix.file_name()),
            "fix {task_name} ({description})\n{source}\nerror:\n{error}\n",
        )
        .unwrap();
        let fix_template = PromptTemplate::load(prompts.path(), TemplateKind::ValidationFix).unwrap();
        // Keep the prompts tempdir alive by storing its path dir in scripts_dir's
        // lifetime: the template body is already loaded, dropping is fine.
        drop(prompts);

        Ctx {
            sample,
            sandbox: Sandbox::new("python3 {script} {data}", Duration::from_secs(30)),
            backend,
            xlog_dir: tempfile::tempdir().unwrap(),
            fix_template,
            tasks: TaskList(vec![TaskSpec { name: "t".into(), description: "desc".into() }]),
            clock: TestClock::new(Utc.with_ymd_and_hms(2025, 10, 28, 17, 24, 12).unwrap(), 100),
            scripts_dir,
            _fixture_dir: fixture_dir,
        }
    }

    fn script(ctx: &Ctx, name: &str, source: &str) -> GeneratedScript {
        let path = ctx.scripts_dir.path().join(format!("{name}.py"));
        std::fs::write(&path, source).unwrap();
        GeneratedScript {
            task_name: name.into(),
            source: source.into(),
            origin: ScriptOrigin::Generated,
            created_at: Utc.with_ymd_and_hms(2025, 10, 28, 17, 0, 0).unwrap(),
            path,
        }
    }

    fn validate(ctx: &mut Ctx, scripts: Vec<GeneratedScript>) -> ValidationOutcome {
        let xlog = ExchangeLog::new(ctx.xlog_dir.path());
        validate_all(
            scripts,
            &ctx.sample,
            &ctx.sandbox,
            &mut ctx.backend,
            &xlog,
            1,
            &ctx.fix_template,
            &ctx.tasks,
            2,
            Duration::from_secs(5),
            &ctx.clock,
        )
        .unwrap()
    }

    #[test]
    fn clean_script_passes_initial() {
        let mut c = ctx(&[]);
        let s = script(&c, "t", GOOD);
        let outcome = validate(&mut c, vec![s]);
        let record = &outcome.records[0];
        assert_eq!(record.status, ValidationStatus::PassedInitial);
        assert_eq!(record.attempts_used, 0);
        assert_eq!(record.last_error, None);
        assert_eq!(record.durations_s.exec.len(), 1);
        assert!(record.durations_s.llm_fix.is_empty());
        assert_eq!(outcome.passed.len(), 1);
        assert_eq!(c.sandbox.exec_count(), 1);
    }

    #[test]
    fn broken_script_repaired_on_first_attempt() {
        let fixed = format!("```python\n{GOOD}```");
        let mut c = ctx(&[&fixed]);
        let s = script(&c, "t", BAD);
        let outcome = validate(&mut c, vec![s]);
        let record = &outcome.records[0];
        assert_eq!(record.status, ValidationStatus::PassedAfterFix);
        assert_eq!(record.attempts_used, 1);
        assert_eq!(record.last_error, None);
        assert_eq!(record.durations_s.exec.len(), 2);
        assert_eq!(record.durations_s.llm_fix.len(), 1);
        assert_eq!(outcome.passed.len(), 1);
        assert_eq!(outcome.passed[0].source, GOOD, "repaired source is what passed");
        assert_eq!(
            std::fs::read_to_string(&outcome.passed[0].path).unwrap(),
            GOOD,
            "repair overwrote the script on disk"
        );
    }

    #[test]
    fn exhausted_budget_fails_with_full_attempts() {
        let mut c = ctx(&[BAD, NON_JSON]);
        let s = script(&c, "t", BAD);
        let outcome = validate(&mut c, vec![s]);
        let record = &outcome.records[0];
        assert_eq!(record.status, ValidationStatus::Failed);
        assert_eq!(record.attempts_used, 2);
        assert!(record.last_error.as_deref().unwrap().starts_with("stdout is not valid JSON"));
        assert_eq!(record.durations_s.exec.len(), 3, "initial + 2 re-checks");
        assert_eq!(record.durations_s.llm_fix.len(), 2);
        assert!(outcome.passed.is_empty());
        assert_eq!(c.sandbox.exec_count(), 3);
    }

    #[test]
    fn failed_model_call_consumes_an_attempt_without_executing() {
        // No fixture entries: both fix calls miss and consume attempts.
        let mut c = ctx(&[]);
        let s = script(&c, "t", BAD);
        let outcome = validate(&mut c, vec![s]);
        let record = &outcome.records[0];
        assert_eq!(record.status, ValidationStatus::Failed);
        assert_eq!(record.attempts_used, 2);
        assert!(record.last_error.as_deref().unwrap().starts_with("llm_transport_error"));
        assert_eq!(record.durations_s.exec.len(), 1, "no repaired source, no re-check");
        assert_eq!(record.durations_s.llm_fix.len(), 2);
        assert_eq!(c.sandbox.exec_count(), 1);
    }

    #[test]
    fn second_attempt_can_succeed() {
        let fixed = format!("```python\n{GOOD}```");
        let mut c = ctx(&[BAD, &fixed]);
        let s = script(&c, "t", NON_JSON);
        let outcome = validate(&mut c, vec![s]);
        let record = &outcome.records[0];
        assert_eq!(record.status, ValidationStatus::PassedAfterFix);
        assert_eq!(record.attempts_used, 2);
        assert_eq!(record.durations_s.exec.len(), 3);
    }

    #[test]
    fn mixed_batch_gets_per_script_records() {
        let fixed = format!("```python\n{GOOD}```");
        let mut c = ctx(&[&fixed]);
        c.tasks = TaskList(vec![
            TaskSpec { name: "good".into(), description: "g".into() },
            TaskSpec { name: "fixable".into(), description: "f".into() },
        ]);
        let scripts = vec![script(&c, "good", GOOD), script(&c, "fixable", BAD)];
        let outcome = validate(&mut c, scripts);
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.records[0].status, ValidationStatus::PassedInitial);
        assert_eq!(outcome.records[1].status, ValidationStatus::PassedAfterFix);
        assert_eq!(outcome.passed.len(), 2);
    }

    #[test]
    fn summary_round_trips() {
        let records = vec![ValidationRecord {
            task_name: "t".into(),
            status: ValidationStatus::PassedAfterFix,
            attempts_used: 1,
            last_error: None,
            durations_s: ValidationDurations { exec: vec![0.5, 0.6], llm_fix: vec![1.2] },
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(VALIDATOR_SUMMARY_FILE);
        write_validator_summary(&path, &records).unwrap();
        let loaded = read_validator_summary(&path).unwrap();
        assert_eq!(records, loaded);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"passed_after_fix\""));
    }

    #[test]
    fn repository_admission_is_idempotent_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let repo_dir = dir.path().join("repository");
        let mut repo = Repository::open(&repo_dir).unwrap();
        let clock = TestClock::new(Utc.with_ymd_and_hms(2025, 10, 28, 17, 0, 0).unwrap(), 60_000);

        let mut s = GeneratedScript {
            task_name: "t".into(),
            source: GOOD.into(),
            origin: ScriptOrigin::Generated,
            created_at: Utc.with_ymd_and_hms(2025, 10, 28, 17, 0, 0).unwrap(),
            path: dir.path().join("t.py"),
        };
        assert!(repo.admit(&s, &clock).unwrap(), "first admission changes the repo");
        let first_ts = repo.index["t"].validated_at;
        assert!(!repo.admit(&s, &clock).unwrap(), "unchanged content is a no-op");
        assert_eq!(repo.index["t"].validated_at, first_ts, "timestamp not bumped");

        s.source = format!("# changed\n{GOOD}");
        assert!(repo.admit(&s, &clock).unwrap(), "new content re-admits");
        assert_ne!(repo.index["t"].validated_at, first_ts);

        let reopened = Repository::open(&repo_dir).unwrap();
        assert_eq!(reopened.len(), 1);
        let entries = reopened.entries();
        assert_eq!(entries[0].0, "t");
        assert!(entries[0].1.is_file());
        assert_eq!(std::fs::read_to_string(&entries[0].1).unwrap(), s.source);
    }
}
