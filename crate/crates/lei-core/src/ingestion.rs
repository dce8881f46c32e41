//! Sensor-data ingestion: loading a domain's bundle (sample CSV, metadata,
//! context, prior tasks), polling a remote JSON endpoint into an append-only
//! raw CSV store, and extracting recent-window samples from that store.

use crate::clock::{format_ts, parse_ts_lenient, Clock};
use crate::task_generator::TaskList;
use chrono::{DateTime, Duration as ChronoDuration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("required file missing: {0}")]
    MissingFile(PathBuf),
    #[error("malformed CSV in {path}: {message}")]
    MalformedCsv { path: PathBuf, message: String },
    #[error("malformed JSON in {path}: {message}")]
    MalformedJson { path: PathBuf, message: String },
    #[error("context file {0} is empty")]
    EmptyContext(PathBuf),
    #[error("raw data store {0} has no rows")]
    EmptyStore(PathBuf),
    #[error("source fetch failed: {0}")]
    HttpError(String),
    #[error("payload missing mapped field `{field}`")]
    SchemaMismatch { field: String },
    #[error("invalid source spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything step 1 needs to describe the domain to the model.
#[derive(Debug, Clone)]
pub struct DomainBundle {
    pub sample_csv: String,
    pub metadata: Value,
    pub context: String,
    pub previous_tasks: TaskList,
}

/// Load and validate the domain bundle from resolved paths.
///
/// The sample CSV must have a header plus at least one data row whose first
/// column parses as a timestamp; metadata must be a JSON object; the context
/// must be non-empty. A missing task list simply yields an empty list.
pub fn load_domain_bundle(
    sample: &Path,
    metadata: &Path,
    context: &Path,
    tasks_list: &Path,
) -> Result<DomainBundle, IngestError> {
    let sample_csv = read_required(sample)?;
    validate_sample_csv(sample, &sample_csv)?;

    let metadata_text = read_required(metadata)?;
    let metadata_value: Value =
        serde_json::from_str(&metadata_text).map_err(|e| IngestError::MalformedJson {
            path: metadata.to_path_buf(),
            message: e.to_string(),
        })?;
    if !metadata_value.is_object() {
        return Err(IngestError::MalformedJson {
            path: metadata.to_path_buf(),
            message: "top-level value must be an object".into(),
        });
    }

    let context_text = read_required(context)?;
    if context_text.trim().is_empty() {
        return Err(IngestError::EmptyContext(context.to_path_buf()));
    }

    let previous_tasks = if tasks_list.is_file() {
        TaskList::load(tasks_list).map_err(|e| IngestError::MalformedJson {
            path: tasks_list.to_path_buf(),
            message: e.to_string(),
        })?
    } else {
        TaskList::default()
    };

    Ok(DomainBundle { sample_csv, metadata: metadata_value, context: context_text, previous_tasks })
}

fn read_required(path: &Path) -> Result<String, IngestError> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(IngestError::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

fn validate_sample_csv(path: &Path, text: &str) -> Result<(), IngestError> {
    let bad = |message: String| IngestError::MalformedCsv { path: path.to_path_buf(), message };
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(bad("missing header row".into()));
    }
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        rows += 1;
        let first = record.get(0).unwrap_or("");
        if parse_ts_lenient(first).is_none() {
            return Err(bad(format!("row {rows}: `{first}` is not a timestamp")));
        }
    }
    if rows == 0 {
        return Err(bad("no data rows".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Remote source polling
// ---------------------------------------------------------------------------

/// Maps a payload field (dotted path, numeric segments index arrays) to a
/// CSV column name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ColumnMap {
    pub field: String,
    pub column: String,
}

/// Declarative description of a remote JSON endpoint, loaded from
/// `source.json` in the domain directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SourceSpec {
    /// URL template; `{lat}` and `{lon}` are substituted.
    pub url: String,
    pub lat: f64,
    pub lon: f64,
    pub poll_interval_s: u64,
    pub columns: Vec<ColumnMap>,
}

impl SourceSpec {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = read_required(path)?;
        let spec: SourceSpec =
            serde_json::from_str(&text).map_err(|e| IngestError::MalformedJson {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if spec.columns.is_empty() {
            return Err(IngestError::InvalidSpec("columns must not be empty".into()));
        }
        if spec.poll_interval_s == 0 {
            return Err(IngestError::InvalidSpec("poll_interval_s must be positive".into()));
        }
        Ok(spec)
    }

    pub fn render_url(&self) -> String {
        self.url.replace("{lat}", &self.lat.to_string()).replace("{lon}", &self.lon.to_string())
    }
}

/// Walk a dotted path into a JSON payload; numeric segments index arrays.
pub fn lookup_field<'a>(payload: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cursor = payload;
    for segment in path.split('.') {
        cursor = match cursor {
            Value::Object(map) => map.get(segment)?,
            Value::Array(items) => items.get(segment.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cursor)
}

/// Anything that can produce one JSON payload per poll.
pub trait PayloadSource {
    fn fetch(&mut self) -> Result<Value, IngestError>;
}

/// Live HTTP GET against the rendered source URL.
pub struct HttpSource {
    url: String,
    client: reqwest::blocking::Client,
    timeout: std::time::Duration,
}

impl HttpSource {
    pub fn new(spec: &SourceSpec, timeout: std::time::Duration) -> Self {
        HttpSource { url: spec.render_url(), client: reqwest::blocking::Client::new(), timeout }
    }
}

impl PayloadSource for HttpSource {
    fn fetch(&mut self) -> Result<Value, IngestError> {
        let resp = self
            .client
            .get(&self.url)
            .timeout(self.timeout)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| IngestError::HttpError(e.to_string()))?;
        resp.json::<Value>().map_err(|e| IngestError::HttpError(e.to_string()))
    }
}

/// Replays `*.json` payload files from a directory in sorted name order.
/// Exhausting the directory surfaces as a fetch failure.
pub struct ReplaySource {
    payloads: std::vec::IntoIter<PathBuf>,
}

impl ReplaySource {
    pub fn new(dir: &Path) -> Result<Self, IngestError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(ReplaySource { payloads: files.into_iter() })
    }
}

impl PayloadSource for ReplaySource {
    fn fetch(&mut self) -> Result<Value, IngestError> {
        let path = self
            .payloads
            .next()
            .ok_or_else(|| IngestError::HttpError("replay source exhausted".into()))?;
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| IngestError::MalformedJson {
            path: path.clone(),
            message: e.to_string(),
        })
    }
}

/// Fetch one payload and append one row to the raw store.
///
/// The store gets a `timestamp,{columns...}` header on first write; every
/// mapped field is checked before anything is written, so a schema mismatch
/// never leaves a partial row. Returns the total number of data rows now in
/// the store.
pub fn poll_source(
    spec: &SourceSpec,
    raw_store: &Path,
    source: &mut dyn PayloadSource,
    clock: &dyn Clock,
) -> Result<u64, IngestError> {
    let payload = source.fetch()?;
    let mut cells = Vec::with_capacity(spec.columns.len() + 1);
    cells.push(format_ts(clock.now()));
    for map in &spec.columns {
        let value = lookup_field(&payload, &map.field)
            .ok_or_else(|| IngestError::SchemaMismatch { field: map.field.clone() })?;
        cells.push(match value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        });
    }

    if let Some(parent) = raw_store.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let fresh = !raw_store.exists() || std::fs::metadata(raw_store)?.len() == 0;
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(raw_store)?;
    if fresh {
        let header: Vec<&str> = std::iter::once("timestamp")
            .chain(spec.columns.iter().map(|c| c.column.as_str()))
            .collect();
        writeln!(file, "{}", header.join(","))?;
    }
    writeln!(file, "{}", cells.join(","))?;

    count_rows(raw_store)
}

fn count_rows(raw_store: &Path) -> Result<u64, IngestError> {
    let text = std::fs::read_to_string(raw_store)?;
    Ok(text.lines().skip(1).filter(|l| !l.trim().is_empty()).count() as u64)
}

/// Extract rows from the raw store whose timestamp falls within `window`
/// (inclusive) of the newest row, returned as CSV text with the header.
pub fn extract_sample(raw_store: &Path, window: ChronoDuration) -> Result<String, IngestError> {
    let text = match std::fs::read_to_string(raw_store) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IngestError::MissingFile(raw_store.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let bad = |message: String| IngestError::MalformedCsv {
        path: raw_store.to_path_buf(),
        message,
    };

    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| IngestError::EmptyStore(raw_store.to_path_buf()))?;
    let mut rows: Vec<(DateTime<Utc>, &str)> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let first = line.split(',').next().unwrap_or("");
        let ts = parse_ts_lenient(first)
            .ok_or_else(|| bad(format!("row {}: `{first}` is not a timestamp", i + 1)))?;
        rows.push((ts, line));
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyStore(raw_store.to_path_buf()));
    }
    let latest = rows.iter().map(|(ts, _)| *ts).max().expect("non-empty");
    let cutoff = latest - window;
    let mut out = String::from(header);
    out.push('\n');
    for (ts, line) in rows {
        if ts >= cutoff {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}
