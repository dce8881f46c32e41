//! Step 1: turn the domain bundle into a single task-proposal instruction,
//! parse the model's reply into named tasks, and merge them into the
//! persisted task list.

use crate::fsutil;
use crate::llm_client::{extract_json, ExtractError};
use crate::resource_monitor::ResourceSummary;
use crate::task_generator::template::PromptTemplate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

pub use template::{section_block, TemplateError, TemplateKind};

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("task generation failed: {0}")]
    StepFailed(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One proposed analytic task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub description: String,
}

/// The persisted task list: a bare JSON array of task objects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskList(pub Vec<TaskSpec>);

impl TaskList {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        fsutil::read_json(path)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fsutil::atomic_write_json(path, self)
    }

    pub fn names(&self) -> Vec<&str> {
        self.0.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TaskSpec> {
        self.0.iter()
    }
}

/// Canonicalize a task name into a filesystem- and identifier-safe slug:
/// lowercase, separators become underscores, other punctuation is dropped,
/// runs of underscores collapse. `None` when nothing usable remains or the
/// result exceeds 80 characters.
pub fn normalize_task_name(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.trim().chars() {
        let lower = ch.to_ascii_lowercase();
        match lower {
            'a'..='z' | '0'..='9' | '_' => out.push(lower),
            ' ' | '-' | '.' | '/' | '\t' => out.push('_'),
            _ => {}
        }
    }
    let mut collapsed = String::with_capacity(out.len());
    let mut prev_underscore = false;
    for ch in out.chars() {
        if ch == '_' {
            if !prev_underscore {
                collapsed.push('_');
            }
            prev_underscore = true;
        } else {
            collapsed.push(ch);
            prev_underscore = false;
        }
    }
    let trimmed = collapsed.trim_matches('_').to_string();
    if trimmed.is_empty() || trimmed.len() > 80 {
        None
    } else {
        Some(trimmed)
    }
}

/// Prompt templates and the delimited-section renderer.
pub mod template {
    use std::collections::BTreeMap;
    use std::path::{Path, PathBuf};
    use thiserror::Error;

    #[derive(Debug, Error)]
    pub enum TemplateError {
        #[error("template file missing: {0}")]
        MissingFile(PathBuf),
        #[error("template {path} must contain `{{{placeholder}}}` exactly once (found {count})")]
        UnresolvedPlaceholder { path: PathBuf, placeholder: &'static str, count: usize },
        #[error(transparent)]
        Io(#[from] std::io::Error),
    }

    /// The three instruction templates the pipeline renders.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum TemplateKind {
        TaskGeneration,
        CodeGeneration,
        ValidationFix,
    }

    impl TemplateKind {
        pub fn file_name(self) -> &'static str {
            match self {
                TemplateKind::TaskGeneration => "task_generation.txt",
                TemplateKind::CodeGeneration => "code_generation.txt",
                TemplateKind::ValidationFix => "validation_fix.txt",
            }
        }

        /// Placeholders the template must contain exactly once each.
        pub fn required_placeholders(self) -> &'static [&'static str] {
            match self {
                TemplateKind::TaskGeneration => {
                    &["sample_data", "metadata", "context", "resource_summary", "previous_tasks"]
                }
                TemplateKind::CodeGeneration => &["tasks", "sample_data"],
                TemplateKind::ValidationFix => &["task_name", "description", "source", "error"],
            }
        }
    }

    /// Wrap `content` in unambiguous BEGIN/END markers so prompt sections
    /// cannot bleed into each other.
    pub fn section_block(name: &str, content: &str) -> String {
        format!(
            "===== BEGIN {name} =====\n{}\n===== END {name} =====",
            content.trim_end_matches('\n')
        )
    }

    /// A validated instruction template.
    #[derive(Debug, Clone)]
    pub struct PromptTemplate {
        kind: TemplateKind,
        body: String,
    }

    impl PromptTemplate {
        pub fn load(prompts_root: &Path, kind: TemplateKind) -> Result<Self, TemplateError> {
            let path = prompts_root.join(kind.file_name());
            let body = match std::fs::read_to_string(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(TemplateError::MissingFile(path))
                }
                Err(e) => return Err(e.into()),
            };
            for placeholder in kind.required_placeholders() {
                let token = format!("{{{placeholder}}}");
                let count = body.matches(&token).count();
                if count != 1 {
                    return Err(TemplateError::UnresolvedPlaceholder {
                        path,
                        placeholder,
                        count,
                    });
                }
            }
            Ok(PromptTemplate { kind, body })
        }

        pub fn kind(&self) -> TemplateKind {
            self.kind
        }

        /// Substitute each placeholder with a delimited section carrying the
        /// given content.
        pub fn render(&self, sections: &BTreeMap<&str, String>) -> String {
            let mut out = self.body.clone();
            for placeholder in self.kind.required_placeholders() {
                let content = sections.get(placeholder).map(String::as_str).unwrap_or("");
                out = out.replace(
                    &format!("{{{placeholder}}}"),
                    &section_block(placeholder, content),
                );
            }
            out
        }
    }
}

/// Render the task-proposal instruction from the domain bundle and the
/// current resource summary. Metadata and JSON sections are pretty-printed
/// with sorted keys so the instruction is byte-stable.
pub fn aggregate_instruction(
    bundle: &crate::ingestion::DomainBundle,
    summary: &ResourceSummary,
    template: &PromptTemplate,
) -> Result<String, TaskGenError> {
    assert_eq!(template.kind(), TemplateKind::TaskGeneration, "wrong template kind");
    let mut sections = std::collections::BTreeMap::new();
    sections.insert("sample_data", bundle.sample_csv.trim_end().to_string());
    sections.insert("metadata", pretty_sorted(&bundle.metadata));
    sections.insert("context", bundle.context.trim().to_string());
    sections.insert(
        "resource_summary",
        pretty_sorted(&serde_json::to_value(summary).map_err(std::io::Error::from)?),
    );
    sections.insert(
        "previous_tasks",
        pretty_sorted(&serde_json::to_value(&bundle.previous_tasks).map_err(std::io::Error::from)?),
    );
    Ok(template.render(&sections))
}

fn pretty_sorted(value: &Value) -> String {
    // serde_json::Value objects iterate in insertion order; rebuild through
    // BTreeMap-backed sorting for stable output.
    fn sort(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let sorted: std::collections::BTreeMap<&String, Value> =
                    map.iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::to_value(sorted).expect("object reserialization")
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string_pretty(&sort(value)).expect("value serialization")
}

/// Why a proposed entry was dropped during parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTask {
    pub reason: String,
    pub raw: Value,
}

/// Parsed task proposals plus everything that was rejected.
#[derive(Debug, Clone)]
pub struct TaskParse {
    pub tasks: Vec<TaskSpec>,
    pub dropped: Vec<DroppedTask>,
}

/// Parse the model's reply into tasks. The reply must contain a JSON array;
/// each element needs a normalizable `name` and a non-empty `description`.
/// Malformed elements are dropped with a reason, never fatal; a reply with no
/// array at all fails the step.
pub fn parse_task_response(response: &str) -> Result<TaskParse, TaskGenError> {
    let value = extract_json(response).map_err(|e: ExtractError| {
        TaskGenError::StepFailed(format!("no task array in response: {e}"))
    })?;
    let items = value
        .as_array()
        .ok_or_else(|| TaskGenError::StepFailed("response JSON is not an array".into()))?;

    let mut tasks = Vec::new();
    let mut dropped = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for item in items {
        let Some(obj) = item.as_object() else {
            dropped.push(DroppedTask { reason: "not_an_object".into(), raw: item.clone() });
            continue;
        };
        let Some(raw_name) = obj.get("name").and_then(Value::as_str) else {
            dropped.push(DroppedTask { reason: "missing_name".into(), raw: item.clone() });
            continue;
        };
        let description = obj
            .get("description")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|d| !d.is_empty());
        let Some(description) = description else {
            dropped.push(DroppedTask { reason: "missing_description".into(), raw: item.clone() });
            continue;
        };
        let Some(name) = normalize_task_name(raw_name) else {
            dropped.push(DroppedTask { reason: "invalid_name".into(), raw: item.clone() });
            continue;
        };
        if !seen.insert(name.clone()) {
            dropped.push(DroppedTask { reason: "duplicate_name".into(), raw: item.clone() });
            continue;
        }
        tasks.push(TaskSpec { name, description: description.to_string() });
    }
    Ok(TaskParse { tasks, dropped })
}

/// Result of merging proposals into the persisted list.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    /// Previous list plus newly added tasks, in order.
    pub merged: TaskList,
    /// Only the tasks that were not already present.
    pub added: Vec<TaskSpec>,
}

/// Merge proposals into the previous list, deduplicating by name against both
/// the previous list and earlier proposals.
pub fn merge_tasks(previous: &TaskList, proposed: &[TaskSpec]) -> MergeOutcome {
    let mut known: BTreeSet<&str> = previous.names().into_iter().collect();
    let mut merged = previous.clone();
    let mut added = Vec::new();
    for task in proposed {
        if known.insert(task.name.as_str()) {
            merged.0.push(task.clone());
            added.push(task.clone());
        }
    }
    MergeOutcome { merged, added }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn normalize_handles_separators_and_case() {
        assert_eq!(normalize_task_name("Daily AQI Mean"), Some("daily_aqi_mean".into()));
        assert_eq!(normalize_task_name("pm2.5-spike/detect"), Some("pm2_5_spike_detect".into()));
        assert_eq!(normalize_task_name("  __weird__  "), Some("weird".into()));
        assert_eq!(normalize_task_name("___"), None);
        assert_eq!(normalize_task_name("!!!"), None);
        assert_eq!(normalize_task_name(&"x".repeat(81)), None);
        assert_eq!(normalize_task_name(&"x".repeat(80)), Some("x".repeat(80)));
    }

    #[test]
    fn normalize_is_idempotent() {
        for raw in ["Daily AQI Mean", "a--b", "x.y/z", "already_normal"] {
            let once = normalize_task_name(raw).unwrap();
            assert_eq!(normalize_task_name(&once), Some(once.clone()));
        }
    }

    #[test]
    fn section_block_delimits_and_trims_trailing_newlines() {
        let block = section_block("context", "hello\n\n");
        assert_eq!(block, "===== BEGIN context =====\nhello\n===== END context =====");
    }

    fn write_template(dir: &Path, kind: TemplateKind, body: &str) {
        std::fs::write(dir.join(kind.file_name()), body).unwrap();
    }

    #[test]
    fn template_requires_each_placeholder_exactly_once() {
        let dir = tempfile::tempdir().unwrap();
        write_template(dir.path(), TemplateKind::CodeGeneration, "T: {tasks}\nS: {sample_data}\n");
        assert!(PromptTemplate::load(dir.path(), TemplateKind::CodeGeneration).is_ok());

        write_template(dir.path(), TemplateKind::CodeGeneration, "T: {tasks} {tasks}\nS: {sample_data}\n");
        let err = PromptTemplate::load(dir.path(), TemplateKind::CodeGeneration).unwrap_err();
        assert!(matches!(
            err,
            TemplateError::UnresolvedPlaceholder { placeholder: "tasks", count: 2, .. }
        ));

        write_template(dir.path(), TemplateKind::CodeGeneration, "S: {sample_data}\n");
        let err = PromptTemplate::load(dir.path(), TemplateKind::CodeGeneration).unwrap_err();
        assert!(matches!(
            err,
            TemplateError::UnresolvedPlaceholder { placeholder: "tasks", count: 0, .. }
        ));
    }

    #[test]
    fn render_wraps_sections_in_markers() {
        let dir = tempfile::tempdir().unwrap();
        write_template(dir.path(), TemplateKind::CodeGeneration, "do\n{tasks}\nwith\n{sample_data}\n");
        let template = PromptTemplate::load(dir.path(), TemplateKind::CodeGeneration).unwrap();
        let mut sections = std::collections::BTreeMap::new();
        sections.insert("tasks", "[]".to_string());
        sections.insert("sample_data", "timestamp,v\n1,2".to_string());
        let rendered = template.render(&sections);
        assert!(rendered.contains("===== BEGIN tasks =====\n[]\n===== END tasks ====="));
        assert!(rendered.contains("===== BEGIN sample_data =====\ntimestamp,v\n1,2\n===== END sample_data ====="));
    }

    #[test]
    fn parse_accepts_fenced_array_and_drops_bad_entries() {
        let response = r#"Sure! Here you go:
```json
[
  {"name": "Daily AQI Mean", "description": "Mean AQI per day"},
  {"name": "daily aqi mean", "description": "duplicate after normalization"},
  {"name": "", "description": "unusable name"},
  {"description": "no name at all"},
  {"name": "pm_peak", "description": ""},
  "just a string",
  {"name": "pm_peak_hours", "description": "Hours above threshold"}
]
```
Hope that helps!"#;
        let parse = parse_task_response(response).unwrap();
        assert_eq!(
            parse.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(),
            vec!["daily_aqi_mean", "pm_peak_hours"]
        );
        let reasons: Vec<&str> = parse.dropped.iter().map(|d| d.reason.as_str()).collect();
        assert_eq!(
            reasons,
            vec!["duplicate_name", "invalid_name", "missing_name", "missing_description", "not_an_object"]
        );
    }

    #[test]
    fn parse_without_array_fails_step() {
        assert!(matches!(
            parse_task_response("I could not think of any tasks."),
            Err(TaskGenError::StepFailed(_))
        ));
        assert!(matches!(
            parse_task_response(r#"{"name": "x", "description": "not an array"}"#),
            Err(TaskGenError::StepFailed(_))
        ));
    }

    #[test]
    fn merge_dedupes_against_previous_and_keeps_order() {
        let previous = TaskList(vec![
            TaskSpec { name: "a".into(), description: "old a".into() },
            TaskSpec { name: "b".into(), description: "old b".into() },
        ]);
        let proposed = vec![
            TaskSpec { name: "b".into(), description: "new b".into() },
            TaskSpec { name: "c".into(), description: "new c".into() },
        ];
        let outcome = merge_tasks(&previous, &proposed);
        assert_eq!(outcome.merged.names(), vec!["a", "b", "c"]);
        assert_eq!(outcome.added.len(), 1);
        assert_eq!(outcome.added[0].name, "c");
        assert_eq!(outcome.merged.0[1].description, "old b", "previous entry wins");
    }

    #[test]
    fn task_list_serializes_as_bare_array() {
        let list = TaskList(vec![TaskSpec { name: "a".into(), description: "d".into() }]);
        let text = serde_json::to_string(&list).unwrap();
        assert!(text.starts_with('['), "task list is a bare array: {text}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks_list.json");
        list.save(&path).unwrap();
        assert_eq!(TaskList::load(&path).unwrap(), list);
    }

    #[test]
    fn aggregate_instruction_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        write_template(
            dir.path(),
            TemplateKind::TaskGeneration,
            "A\n{sample_data}\nB\n{metadata}\nC\n{context}\nD\n{resource_summary}\nE\n{previous_tasks}\n",
        );
        let template = PromptTemplate::load(dir.path(), TemplateKind::TaskGeneration).unwrap();
        let bundle = crate::ingestion::DomainBundle {
            sample_csv: "timestamp,v\n2025-10-28T17:00:00Z,1\n".into(),
            metadata: json!({"zebra": 1, "alpha": {"nested_z": 2, "nested_a": 3}}),
            context: "ctx\n".into(),
            previous_tasks: TaskList::default(),
        };
        let summary = crate::resource_monitor::windowed_summary(
            &[crate::resource_monitor::ResourceSample {
                timestamp: chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2025, 10, 28, 17, 0, 0)
                    .unwrap(),
                cpu_pct: 12.5,
                mem_used_pct: 37.5,
                mem_available_mb: 1843.2,
            }],
            chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2025, 10, 28, 17, 0, 30).unwrap(),
            &[1],
            4,
        )
        .unwrap();
        let first = aggregate_instruction(&bundle, &summary, &template).unwrap();
        let second = aggregate_instruction(&bundle, &summary, &template).unwrap();
        assert_eq!(first, second);
        let alpha = first.find("\"alpha\"").unwrap();
        let zebra = first.find("\"zebra\"").unwrap();
        assert!(alpha < zebra, "metadata keys are sorted");
        assert!(first.contains("===== BEGIN resource_summary ====="));
    }
}
