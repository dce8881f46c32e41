//! Step 2: partition tasks into bounded batches, ask the model for one script
//! per task, normalize the returned sources, and persist them under the
//! domain's output directory.

use crate::clock::{ts_serde, Clock};
use crate::fsutil;
use crate::llm_client::{extract_json, invoke_logged, CallTag, ExchangeLog, LlmBackend};
use crate::step::StepId;
use crate::task_generator::{normalize_task_name, template::PromptTemplate, TaskSpec, TemplateKind};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

/// Per-task generation failure ledger under the logs root.
pub const CODEGEN_FAILURES_FILE: &str = "codegen_failures.jsonl";

#[derive(Debug, Error)]
pub enum CodeGenError {
    #[error("source is empty after normalization")]
    EmptyAfterNormalize,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a script came from initial generation or a repair attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScriptOrigin {
    Generated,
    Regenerated { attempt: u32 },
}

/// A normalized script ready to validate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedScript {
    pub task_name: String,
    pub source: String,
    pub origin: ScriptOrigin,
    #[serde(with = "ts_serde")]
    pub created_at: DateTime<Utc>,
    pub path: PathBuf,
}

/// Ordered batches, each holding at most `k` tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<TaskSpec>>,
}

/// Split tasks into consecutive batches of at most `k`, preserving order.
/// With `n` tasks this yields exactly `ceil(n / k)` non-empty batches.
pub fn partition_batches(tasks: &[TaskSpec], k: usize) -> BatchPlan {
    assert!(k >= 1, "batch size must be at least 1");
    BatchPlan { batches: tasks.chunks(k).map(|c| c.to_vec()).collect() }
}

// ---------------------------------------------------------------------------
// Source normalization
// ---------------------------------------------------------------------------

/// Canonicalize model-returned source text:
///
/// * outer whitespace is trimmed;
/// * outer ``` fences (with an optional info string) are stripped, repeatedly,
///   so double-fenced replies collapse;
/// * single-line payloads whose newlines arrived as literal `\n`, `\t`, or
///   `\"` escapes are decoded;
/// * the result ends with exactly one trailing newline.
///
/// The whole transform runs to a fixpoint, so normalizing an already
/// normalized source is a no-op.
pub fn normalize_source(raw: &str) -> Result<String, CodeGenError> {
    let mut text = raw.trim().to_string();
    loop {
        let next = normalize_pass(&text);
        if next == text {
            break;
        }
        text = next;
    }
    if text.is_empty() {
        return Err(CodeGenError::EmptyAfterNormalize);
    }
    Ok(format!("{text}\n"))
}

fn normalize_pass(input: &str) -> String {
    let mut text = input.trim().to_string();
    while let Some(stripped) = strip_outer_fence(&text) {
        text = stripped.trim().to_string();
    }
    if !text.contains('\n')
        && (text.contains("\\n") || text.contains("\\t") || text.contains("\\\""))
    {
        text = decode_escapes(&text);
    }
    text.trim().to_string()
}

/// Remove one outer fence pair. The opener may carry an info string (to the
/// end of its line); the body must end with a closing fence or nothing is
/// stripped.
fn strip_outer_fence(text: &str) -> Option<String> {
    let rest = text.strip_prefix("```")?;
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        // Single-line form such as "```{...}```": no info string to skip.
        None => rest,
    };
    let body = body.trim_end();
    let inner = body.strip_suffix("```")?;
    Some(inner.to_string())
}

/// Decode literal `\n`, `\t`, and `\"` sequences. `\\` and unknown escapes
/// are left untouched.
fn decode_escapes(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' && i + 1 < bytes.len() {
            match bytes[i + 1] {
                b'n' => {
                    out.push('\n');
                    i += 2;
                    continue;
                }
                b't' => {
                    out.push('\t');
                    i += 2;
                    continue;
                }
                b'"' => {
                    out.push('"');
                    i += 2;
                    continue;
                }
                _ => {}
            }
        }
        let ch = text[i..].chars().next().expect("in-bounds char");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

// ---------------------------------------------------------------------------
// Batch generation
// ---------------------------------------------------------------------------

/// One task that produced no usable script, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub run_id: u64,
    pub batch_index: u32,
    /// Absent when the whole batch failed before tasks could be told apart.
    pub task_name: Option<String>,
    pub reason: String,
}

/// Scripts and failures from one batch call.
#[derive(Debug, Clone)]
pub struct BatchGenOutcome {
    pub scripts: Vec<GeneratedScript>,
    pub failures: Vec<GenerationFailure>,
}

/// Render the code-generation instruction for one batch.
pub fn render_code_instruction(
    template: &PromptTemplate,
    batch: &[TaskSpec],
    sample_csv: &str,
) -> String {
    assert_eq!(template.kind(), TemplateKind::CodeGeneration, "wrong template kind");
    let mut sections = BTreeMap::new();
    sections.insert(
        "tasks",
        serde_json::to_string_pretty(batch).expect("task specs serialize"),
    );
    sections.insert("sample_data", sample_csv.trim_end().to_string());
    template.render(&sections)
}

pub fn script_path(scripts_dir: &Path, task_name: &str, extension: &str) -> PathBuf {
    scripts_dir.join(format!("{task_name}{extension}"))
}

/// Ask the model for this batch's scripts and normalize what comes back.
///
/// A failed exchange or an unusable reply fails every task in the batch; a
/// parseable reply fails only the tasks it omits or answers unusably. Nothing
/// here aborts the pipeline — failures are data.
#[allow(clippy::too_many_arguments)]
pub fn generate_code_batch(
    backend: &mut dyn LlmBackend,
    xlog: &ExchangeLog,
    run_id: u64,
    batch_index: u32,
    batch: &[TaskSpec],
    sample_csv: &str,
    template: &PromptTemplate,
    timeout: Duration,
    clock: &dyn Clock,
    scripts_dir: &Path,
    extension: &str,
) -> std::io::Result<BatchGenOutcome> {
    let instruction = render_code_instruction(template, batch, sample_csv);
    let tag = CallTag { step: StepId::CodeGen, batch: Some(batch_index), attempt: 0 };
    let exchange = invoke_logged(backend, xlog, run_id, &tag, &instruction, timeout, clock)?;

    let fail_all = |reason: &str| BatchGenOutcome {
        scripts: Vec::new(),
        failures: batch
            .iter()
            .map(|t| GenerationFailure {
                run_id,
                batch_index,
                task_name: Some(t.name.clone()),
                reason: reason.to_string(),
            })
            .collect(),
    };

    if !exchange.is_ok() {
        let reason = match exchange.outcome {
            crate::llm_client::ExchangeOutcome::Timeout => "llm_timeout".to_string(),
            _ => format!(
                "llm_transport_error: {}",
                exchange.error_detail.as_deref().unwrap_or("unknown")
            ),
        };
        return Ok(fail_all(&reason));
    }

    let response = exchange.response.as_deref().unwrap_or("");
    let value = match extract_json(response) {
        Ok(v) => v,
        Err(_) => return Ok(fail_all("unparseable_response")),
    };
    let Some(entries) = value.as_array() else {
        return Ok(fail_all("response_not_array"));
    };

    // Map normalized entry names to their code payloads.
    let mut by_name: BTreeMap<String, &Value> = BTreeMap::new();
    for entry in entries {
        if let Some(name) = entry
            .get("name")
            .and_then(Value::as_str)
            .and_then(normalize_task_name)
        {
            by_name.entry(name).or_insert(entry);
        }
    }

    let mut scripts = Vec::new();
    let mut failures = Vec::new();
    for task in batch {
        let fail = |reason: &str| GenerationFailure {
            run_id,
            batch_index,
            task_name: Some(task.name.clone()),
            reason: reason.to_string(),
        };
        let Some(entry) = by_name.get(&task.name) else {
            failures.push(fail("task_missing_from_response"));
            continue;
        };
        let Some(code) = entry.get("code").and_then(Value::as_str) else {
            failures.push(fail("no_code_in_entry"));
            continue;
        };
        match normalize_source(code) {
            Ok(source) => scripts.push(GeneratedScript {
                task_name: task.name.clone(),
                source,
                origin: ScriptOrigin::Generated,
                created_at: clock.now(),
                path: script_path(scripts_dir, &task.name, extension),
            }),
            Err(CodeGenError::EmptyAfterNormalize) => failures.push(fail("empty_source")),
            Err(CodeGenError::Io(e)) => return Err(e),
        }
    }
    Ok(BatchGenOutcome { scripts, failures })
}

/// Write scripts to disk. An existing file is left alone for freshly
/// `Generated` scripts (a repaired version on disk wins); `Regenerated`
/// scripts always overwrite. Returned scripts carry the on-disk source.
pub fn persist_scripts(scripts: Vec<GeneratedScript>) -> std::io::Result<Vec<GeneratedScript>> {
    let mut out = Vec::with_capacity(scripts.len());
    for mut script in scripts {
        let exists = script.path.is_file();
        match script.origin {
            ScriptOrigin::Generated if exists => {
                script.source = std::fs::read_to_string(&script.path)?;
            }
            _ => {
                fsutil::atomic_write(&script.path, script.source.as_bytes())?;
            }
        }
        out.push(script);
    }
    Ok(out)
}

/// Append generation failures to the ledger.
pub fn record_failures(logs_root: &Path, failures: &[GenerationFailure]) -> std::io::Result<()> {
    let path = logs_root.join(CODEGEN_FAILURES_FILE);
    for failure in failures {
        fsutil::append_line(&path, &serde_json::to_string(failure)?)?;
    }
    Ok(())
}
