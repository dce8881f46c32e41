//! Python bindings: the pure text/partitioning/metric helpers as module
//! functions, plus a `Pipeline` class that drives full runs from Python.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::{json, Value};

use lei_core::clock::{Clock, SystemClock, TestClock};
use lei_core::code_generator;
use lei_core::config::{load_config_with, ConfigOverrides};
use lei_core::llm_client::{self, LlmUsage};
use lei_core::metrics;
use lei_core::pipeline::{MonitorMode, Pipeline as CorePipeline, PipelineOptions};
use lei_core::task_generator::{self, TaskList, TaskSpec};
use lei_core::validator::ValidationStatus;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Convert a JSON document into native Python objects.
fn json_to_py<'py>(py: Python<'py>, value: &Value) -> PyResult<Bound<'py, PyAny>> {
    match value {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_bound_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_bound_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py)
            }
        }
        Value::String(s) => s.as_str().into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

/// Pull the first JSON value out of a model reply (bare, prose-wrapped, or
/// fenced) and return it as Python objects.
#[pyfunction]
fn extract_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let value = llm_client::extract_json(text).map_err(value_err)?;
    json_to_py(py, &value)
}

/// Canonicalize model-returned source text (strip fences, decode escaped
/// newlines, normalize trailing whitespace). Raises ValueError when nothing
/// usable remains.
#[pyfunction]
fn normalize_source(text: &str) -> PyResult<String> {
    code_generator::normalize_source(text).map_err(value_err)
}

/// Canonicalize a task name into a filesystem-safe slug, or None.
#[pyfunction]
fn normalize_task_name(raw: &str) -> Option<String> {
    task_generator::normalize_task_name(raw)
}

/// Split names into consecutive batches of at most `k`, preserving order.
#[pyfunction]
fn partition_batches(names: Vec<String>, k: usize) -> PyResult<Vec<Vec<String>>> {
    if k == 0 {
        return Err(PyValueError::new_err("batch size must be at least 1"));
    }
    let tasks: Vec<TaskSpec> =
        names.into_iter().map(|name| TaskSpec { name, description: String::new() }).collect();
    Ok(code_generator::partition_batches(&tasks, k)
        .batches
        .into_iter()
        .map(|batch| batch.into_iter().map(|t| t.name).collect())
        .collect())
}

/// Merge `(name, description)` proposals into a previous list, deduplicating
/// by name. Returns `(merged, added)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn merge_task_lists(
    previous: Vec<(String, String)>,
    proposed: Vec<(String, String)>,
) -> (Vec<(String, String)>, Vec<(String, String)>) {
    let as_specs = |pairs: Vec<(String, String)>| -> Vec<TaskSpec> {
        pairs.into_iter().map(|(name, description)| TaskSpec { name, description }).collect()
    };
    let as_pairs = |specs: &[TaskSpec]| -> Vec<(String, String)> {
        specs.iter().map(|t| (t.name.clone(), t.description.clone())).collect()
    };
    let outcome = task_generator::merge_tasks(&TaskList(as_specs(previous)), &as_specs(proposed));
    (as_pairs(&outcome.merged.0), as_pairs(&outcome.added))
}

/// Fraction of submitted scripts that validated, initially or after repair.
/// Statuses are `"passed_initial"`, `"passed_after_fix"`, or `"failed"`.
#[pyfunction]
fn reliability(statuses: Vec<String>) -> PyResult<f64> {
    let parsed: Vec<ValidationStatus> = statuses
        .iter()
        .map(|s| {
            serde_json::from_value(Value::String(s.clone()))
                .map_err(|_| PyValueError::new_err(format!("unknown validation status `{s}`")))
        })
        .collect::<PyResult<_>>()?;
    metrics::reliability(&parsed).map_err(value_err)
}

/// Prompt tokens per second of prompt evaluation; None when the duration was
/// not reported.
#[pyfunction]
fn prompt_tokens_per_second(prompt_tokens: u64, prompt_eval_duration_ns: u64) -> Option<f64> {
    let mut usage = LlmUsage::zeros();
    usage.prompt_tokens = prompt_tokens;
    usage.prompt_eval_duration_ns = prompt_eval_duration_ns;
    metrics::prompt_tokens_per_second(&usage)
}

/// Completion tokens per second of generation; None when the duration was
/// not reported.
#[pyfunction]
fn completion_tokens_per_second(completion_tokens: u64, eval_duration_ns: u64) -> Option<f64> {
    let mut usage = LlmUsage::zeros();
    usage.completion_tokens = completion_tokens;
    usage.eval_duration_ns = eval_duration_ns;
    metrics::completion_tokens_per_second(&usage)
}

/// The four-step pipeline, driven from Python.
///
/// `fixture_dir` switches the model backend to canned fixture replies;
/// `test_clock` (RFC 3339) makes every persisted timestamp deterministic and
/// moves resource sampling to step boundaries.
#[pyclass(unsendable)]
struct Pipeline {
    inner: CorePipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config_path, fixture_dir=None, data_type=None, test_clock=None, test_clock_tick_ms=100))]
    fn new(
        config_path: PathBuf,
        fixture_dir: Option<PathBuf>,
        data_type: Option<String>,
        test_clock: Option<String>,
        test_clock_tick_ms: i64,
    ) -> PyResult<Self> {
        let overrides = ConfigOverrides { data_type, fixture_dir };
        let cfg = load_config_with(&config_path, &overrides).map_err(value_err)?;
        let (clock, deterministic): (Arc<dyn Clock>, bool) = match &test_clock {
            Some(start) => {
                let start = chrono::DateTime::parse_from_rfc3339(start)
                    .map_err(|e| PyValueError::new_err(format!("bad test_clock value: {e}")))?
                    .with_timezone(&chrono::Utc);
                (Arc::new(TestClock::new(start, test_clock_tick_ms)), true)
            }
            None => (Arc::new(SystemClock), false),
        };
        let options = PipelineOptions {
            monitor_mode: if deterministic {
                MonitorMode::StepTicks
            } else {
                MonitorMode::Background
            },
            report_out: None,
        };
        let inner = CorePipeline::new(cfg, clock, None, None, options).map_err(runtime_err)?;
        Ok(Pipeline { inner })
    }

    /// Execute one full run (all four steps). Returns a dict with `run_id`,
    /// `halted`, `exit_code`, `report_path`, and the run `manifest`.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let outcome = self.inner.run().map_err(runtime_err)?;
        let manifest = serde_json::to_value(&outcome.manifest).map_err(runtime_err)?;
        let value = json!({
            "run_id": outcome.manifest.run_id,
            "halted": outcome.halted,
            "exit_code": outcome.exit_code(),
            "report_path": outcome.report_path.to_string_lossy(),
            "manifest": manifest,
        });
        json_to_py(py, &value)
    }

    /// Recompile the report from the persisted logs and return it as a dict.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let (report, _path) = self.inner.report_only().map_err(runtime_err)?;
        let value = serde_json::to_value(&report).map_err(runtime_err)?;
        json_to_py(py, &value)
    }
}

#[pymodule]
fn lei_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(extract_json, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_source, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_task_name, m)?)?;
    m.add_function(wrap_pyfunction!(partition_batches, m)?)?;
    m.add_function(wrap_pyfunction!(merge_task_lists, m)?)?;
    m.add_function(wrap_pyfunction!(reliability, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_tokens_per_second, m)?)?;
    m.add_function(wrap_pyfunction!(completion_tokens_per_second, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
