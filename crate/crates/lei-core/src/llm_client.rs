//! Remote-model client: a blocking HTTP backend speaking the
//! `POST {base_url}/api/generate` contract, a deterministic fixture backend
//! for replay, an append-only exchange ledger, and the fenced-JSON extraction
//! used on every model response.

use crate::clock::Clock;
use crate::fsutil;
use crate::step::StepId;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

/// File name of the exchange ledger under the logs root.
pub const EXCHANGES_FILE: &str = "llm_exchanges.jsonl";

#[derive(Debug, Error)]
pub enum LlmClientError {
    #[error("fixture manifest problem in {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("no fixture entry matches step={step} batch={batch:?} attempt={attempt}")]
    FixtureMiss { step: StepId, batch: Option<u32>, attempt: u32 },
    #[error("http error: {0}")]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token and timing accounting for one model call. Durations are nanoseconds,
/// matching the wire fields (`load_duration`, `prompt_eval_duration`,
/// `eval_duration`, `total_duration`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub load_duration_ns: u64,
    pub prompt_eval_duration_ns: u64,
    pub eval_duration_ns: u64,
    pub total_duration_ns: u64,
    pub prompt_eval_count: u64,
    pub eval_count: u64,
    /// False when the backend reported no token counts and zeros were
    /// substituted; such calls are excluded from throughput statistics.
    pub counts_reported: bool,
}

impl LlmUsage {
    pub fn zeros() -> Self {
        LlmUsage {
            prompt_tokens: 0,
            completion_tokens: 0,
            total_tokens: 0,
            load_duration_ns: 0,
            prompt_eval_duration_ns: 0,
            eval_duration_ns: 0,
            total_duration_ns: 0,
            prompt_eval_count: 0,
            eval_count: 0,
            counts_reported: false,
        }
    }

    /// Enforce `total_tokens == prompt_tokens + completion_tokens`.
    pub fn normalized(mut self) -> Self {
        self.total_tokens = self.prompt_tokens + self.completion_tokens;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeOutcome {
    Ok,
    Timeout,
    TransportError,
}

/// One request/response round trip with the model backend.
#[derive(Debug, Clone)]
pub struct LlmExchange {
    pub instruction: String,
    pub response: Option<String>,
    pub usage: Option<LlmUsage>,
    /// Wall-clock seconds as observed by the pipeline clock.
    pub wall_duration_s: f64,
    pub outcome: ExchangeOutcome,
    pub error_detail: Option<String>,
}

impl LlmExchange {
    pub fn is_ok(&self) -> bool {
        self.outcome == ExchangeOutcome::Ok
    }
}

/// Where in the pipeline a call originates; keys fixture lookup and the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallTag {
    pub step: StepId,
    pub batch: Option<u32>,
    pub attempt: u32,
}

/// A model backend the pipeline can call synchronously.
pub trait LlmBackend: Send {
    fn invoke(
        &mut self,
        tag: &CallTag,
        instruction: &str,
        timeout: Duration,
        clock: &dyn Clock,
    ) -> LlmExchange;
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Blocking client for an HTTP generation endpoint.
pub struct HttpBackend {
    base_url: String,
    model_id: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    stream: bool,
}

impl HttpBackend {
    pub fn new(base_url: &str, model_id: &str) -> Self {
        HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            model_id: model_id.to_string(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn call(&self, instruction: &str, timeout: Duration) -> Result<(String, LlmUsage), CallFailure> {
        let url = format!("{}/api/generate", self.base_url);
        let body = GenerateRequest { model: &self.model_id, prompt: instruction, stream: false };
        let resp = self
            .client
            .post(&url)
            .timeout(timeout)
            .json(&body)
            .send()
            .map_err(classify)?
            .error_for_status()
            .map_err(classify)?;
        let payload: Value = resp.json().map_err(classify)?;
        let text = payload
            .get("response")
            .and_then(Value::as_str)
            .ok_or_else(|| CallFailure::Transport("missing `response` field in reply".into()))?
            .to_string();
        Ok((text, usage_from_payload(&payload)))
    }
}

enum CallFailure {
    Timeout,
    Transport(String),
}

fn classify(e: reqwest::Error) -> CallFailure {
    if e.is_timeout() {
        CallFailure::Timeout
    } else {
        CallFailure::Transport(e.to_string())
    }
}

fn u64_field(payload: &Value, key: &str) -> Option<u64> {
    payload.get(key).and_then(Value::as_u64)
}

/// Read the usage block from a generation reply. Counts may be reported under
/// either the `*_tokens` or the `*_eval_count` names; absent counts produce a
/// zeroed record flagged `counts_reported = false`.
fn usage_from_payload(payload: &Value) -> LlmUsage {
    let prompt_eval_count = u64_field(payload, "prompt_eval_count");
    let eval_count = u64_field(payload, "eval_count");
    let prompt_tokens = u64_field(payload, "prompt_tokens").or(prompt_eval_count);
    let completion_tokens = u64_field(payload, "completion_tokens").or(eval_count);
    let reported = prompt_tokens.is_some() || completion_tokens.is_some();
    if !reported {
        let mut z = LlmUsage::zeros();
        z.load_duration_ns = u64_field(payload, "load_duration").unwrap_or(0);
        z.prompt_eval_duration_ns = u64_field(payload, "prompt_eval_duration").unwrap_or(0);
        z.eval_duration_ns = u64_field(payload, "eval_duration").unwrap_or(0);
        z.total_duration_ns = u64_field(payload, "total_duration").unwrap_or(0);
        return z;
    }
    let prompt_tokens = prompt_tokens.unwrap_or(0);
    let completion_tokens = completion_tokens.unwrap_or(0);
    LlmUsage {
        prompt_tokens,
        completion_tokens,
        total_tokens: prompt_tokens + completion_tokens,
        load_duration_ns: u64_field(payload, "load_duration").unwrap_or(0),
        prompt_eval_duration_ns: u64_field(payload, "prompt_eval_duration").unwrap_or(0),
        eval_duration_ns: u64_field(payload, "eval_duration").unwrap_or(0),
        total_duration_ns: u64_field(payload, "total_duration").unwrap_or(0),
        prompt_eval_count: prompt_eval_count.unwrap_or(prompt_tokens),
        eval_count: eval_count.unwrap_or(completion_tokens),
        counts_reported: true,
    }
}

impl LlmBackend for HttpBackend {
    fn invoke(
        &mut self,
        tag: &CallTag,
        instruction: &str,
        timeout: Duration,
        clock: &dyn Clock,
    ) -> LlmExchange {
        let _ = tag;
        let started = clock.now();
        let result = self.call(instruction, timeout);
        let wall_duration_s = crate::clock::seconds_between(started, clock.now());
        match result {
            Ok((response, usage)) => LlmExchange {
                instruction: instruction.to_string(),
                response: Some(response),
                usage: Some(usage.normalized()),
                wall_duration_s,
                outcome: ExchangeOutcome::Ok,
                error_detail: None,
            },
            Err(CallFailure::Timeout) => LlmExchange {
                instruction: instruction.to_string(),
                response: None,
                usage: None,
                wall_duration_s,
                outcome: ExchangeOutcome::Timeout,
                error_detail: Some(format!("no reply within {}s", timeout.as_secs())),
            },
            Err(CallFailure::Transport(detail)) => LlmExchange {
                instruction: instruction.to_string(),
                response: None,
                usage: None,
                wall_duration_s,
                outcome: ExchangeOutcome::TransportError,
                error_detail: Some(detail),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Fixture backend
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct FixtureManifest {
    entries: Vec<FixtureEntryDoc>,
}

#[derive(Debug, Deserialize)]
struct FixtureEntryDoc {
    step: StepId,
    /// Absent means "matches any batch index".
    #[serde(default)]
    batch: Option<u32>,
    /// Absent means "matches any attempt".
    #[serde(default)]
    attempt: Option<u32>,
    response_file: String,
    #[serde(default)]
    usage: Option<FixtureUsageDoc>,
    /// Simulated latency in seconds; sleeps `min(stall_s, timeout)` and
    /// reports a timeout when the stall exceeds the caller's timeout.
    #[serde(default)]
    stall_s: Option<f64>,
    /// How many calls this entry may serve; absent means unlimited.
    #[serde(default)]
    uses: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureUsageDoc {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    #[serde(default)]
    load_duration: u64,
    #[serde(default)]
    prompt_eval_duration: u64,
    #[serde(default)]
    eval_duration: u64,
    #[serde(default)]
    total_duration: u64,
}

struct FixtureEntry {
    step: StepId,
    batch: Option<u32>,
    attempt: Option<u32>,
    response: String,
    usage: Option<FixtureUsageDoc>,
    stall_s: Option<f64>,
    uses: Option<u64>,
    consumed: u64,
}

/// Replays canned responses recorded in `manifest.json`. Entries are matched
/// in manifest order by `(step, batch, attempt)` — absent manifest fields act
/// as wildcards — and each entry serves at most `uses` calls, so repeated
/// calls with the same tag can walk through a scripted sequence.
pub struct FixtureBackend {
    inner: Arc<Mutex<Vec<FixtureEntry>>>,
    dir: PathBuf,
}

impl FixtureBackend {
    pub fn load(dir: &Path) -> Result<Self, LlmClientError> {
        let manifest_path = dir.join("manifest.json");
        let manifest: FixtureManifest =
            fsutil::read_json(&manifest_path).map_err(|e| LlmClientError::BadManifest {
                path: manifest_path.clone(),
                message: e.to_string(),
            })?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for doc in manifest.entries {
            let response_path = dir.join(&doc.response_file);
            let response =
                std::fs::read_to_string(&response_path).map_err(|e| LlmClientError::BadManifest {
                    path: manifest_path.clone(),
                    message: format!("response file {}: {e}", response_path.display()),
                })?;
            entries.push(FixtureEntry {
                step: doc.step,
                batch: doc.batch,
                attempt: doc.attempt,
                response,
                usage: doc.usage,
                stall_s: doc.stall_s,
                uses: doc.uses,
                consumed: 0,
            });
        }
        Ok(FixtureBackend { inner: Arc::new(Mutex::new(entries)), dir: dir.to_path_buf() })
    }

    /// A second handle onto the same consumption state, so a pipeline and a
    /// test harness can observe one scripted sequence together.
    pub fn share(&self) -> FixtureBackend {
        FixtureBackend { inner: Arc::clone(&self.inner), dir: self.dir.clone() }
    }

    fn select(&self, tag: &CallTag) -> Result<(String, Option<FixtureUsageDoc>, Option<f64>), LlmClientError> {
        let mut entries = self.inner.lock().expect("fixture state poisoned");
        for entry in entries.iter_mut() {
            let step_ok = entry.step == tag.step;
            let batch_ok = entry.batch.is_none() || entry.batch == tag.batch;
            let attempt_ok = entry.attempt.is_none() || entry.attempt == Some(tag.attempt);
            let budget_ok = entry.uses.is_none_or(|u| entry.consumed < u);
            if step_ok && batch_ok && attempt_ok && budget_ok {
                entry.consumed += 1;
                return Ok((entry.response.clone(), entry.usage.clone(), entry.stall_s));
            }
        }
        Err(LlmClientError::FixtureMiss { step: tag.step, batch: tag.batch, attempt: tag.attempt })
    }
}

impl LlmBackend for FixtureBackend {
    fn invoke(
        &mut self,
        tag: &CallTag,
        instruction: &str,
        timeout: Duration,
        clock: &dyn Clock,
    ) -> LlmExchange {
        let started = clock.now();
        match self.select(tag) {
            Ok((response, usage, stall)) => {
                if let Some(stall_s) = stall {
                    let stall_dur = Duration::from_secs_f64(stall_s.max(0.0));
                    std::thread::sleep(stall_dur.min(timeout));
                    if stall_dur > timeout {
                        return LlmExchange {
                            instruction: instruction.to_string(),
                            response: None,
                            usage: None,
                            wall_duration_s: crate::clock::seconds_between(started, clock.now()),
                            outcome: ExchangeOutcome::Timeout,
                            error_detail: Some(format!("no reply within {}s", timeout.as_secs())),
                        };
                    }
                }
                let usage = usage
                    .map(|u| LlmUsage {
                        prompt_tokens: u.prompt_tokens,
                        completion_tokens: u.completion_tokens,
                        total_tokens: u.prompt_tokens + u.completion_tokens,
                        load_duration_ns: u.load_duration,
                        prompt_eval_duration_ns: u.prompt_eval_duration,
                        eval_duration_ns: u.eval_duration,
                        total_duration_ns: u.total_duration,
                        prompt_eval_count: u.prompt_tokens,
                        eval_count: u.completion_tokens,
                        counts_reported: true,
                    })
                    .unwrap_or_else(LlmUsage::zeros);
                LlmExchange {
                    instruction: instruction.to_string(),
                    response: Some(response),
                    usage: Some(usage),
                    wall_duration_s: crate::clock::seconds_between(started, clock.now()),
                    outcome: ExchangeOutcome::Ok,
                    error_detail: None,
                }
            }
            Err(miss) => LlmExchange {
                instruction: instruction.to_string(),
                response: None,
                usage: None,
                wall_duration_s: crate::clock::seconds_between(started, clock.now()),
                outcome: ExchangeOutcome::TransportError,
                error_detail: Some(format!("fixture_miss: {miss}")),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Exchange ledger
// ---------------------------------------------------------------------------

/// One ledger line per model call; instructions are stored by digest to keep
/// the log compact and free of prompt text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub run_id: u64,
    pub step: StepId,
    pub batch: Option<u32>,
    pub attempt: u32,
    pub instruction_sha256: String,
    pub outcome: ExchangeOutcome,
    pub error_detail: Option<String>,
    pub usage: Option<LlmUsage>,
    pub wall_duration_s: f64,
}

/// Append-only JSONL ledger of model exchanges.
pub struct ExchangeLog {
    path: PathBuf,
}

impl ExchangeLog {
    pub fn new(logs_root: &Path) -> Self {
        ExchangeLog { path: logs_root.join(EXCHANGES_FILE) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &ExchangeRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record)?;
        fsutil::append_line(&self.path, &line)
    }

    pub fn read_all(&self) -> std::io::Result<Vec<ExchangeRecord>> {
        fsutil::read_jsonl(&self.path)
    }
}

/// Invoke the backend and append the exchange to the ledger in one motion.
pub fn invoke_logged(
    backend: &mut dyn LlmBackend,
    log: &ExchangeLog,
    run_id: u64,
    tag: &CallTag,
    instruction: &str,
    timeout: Duration,
    clock: &dyn Clock,
) -> std::io::Result<LlmExchange> {
    let exchange = backend.invoke(tag, instruction, timeout, clock);
    log.append(&ExchangeRecord {
        run_id,
        step: tag.step,
        batch: tag.batch,
        attempt: tag.attempt,
        instruction_sha256: sha256_hex(instruction.as_bytes()),
        outcome: exchange.outcome,
        error_detail: exchange.error_detail.clone(),
        usage: exchange.usage.clone(),
        wall_duration_s: exchange.wall_duration_s,
    })?;
    Ok(exchange)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

// ---------------------------------------------------------------------------
// JSON extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no JSON value found in response")]
    NoJsonFound,
    #[error("JSON-like content found but no balanced value parses")]
    UnbalancedJson,
}

/// Pull the first parseable JSON value out of free-form model output.
///
/// Fence marker lines (```), leading prose, and trailing commentary are all
/// tolerated: the text is scanned for `{` or `[`, a string-aware bracket
/// matcher finds the balanced span, and the first span that parses wins.
pub fn extract_json(text: &str) -> Result<Value, ExtractError> {
    let stripped: String = text
        .lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");

    let bytes = stripped.as_bytes();
    let mut saw_start = false;
    for (idx, &b) in bytes.iter().enumerate() {
        if b != b'{' && b != b'[' {
            continue;
        }
        saw_start = true;
        if let Some(end) = balanced_end(&stripped[idx..]) {
            let candidate = &stripped[idx..idx + end];
            if let Ok(value) = serde_json::from_str::<Value>(candidate) {
                return Ok(value);
            }
        }
    }
    if saw_start {
        Err(ExtractError::UnbalancedJson)
    } else {
        Err(ExtractError::NoJsonFound)
    }
}

/// Byte length of the balanced bracket span starting at `s[0]` (which must be
/// `{` or `[`), honoring JSON string and escape rules. `None` if unclosed.
fn balanced_end(s: &str) -> Option<usize> {
    let mut stack: Vec<u8> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in s.as_bytes().iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
