//! Pipeline configuration: a flat key/value TOML document with documented
//! defaults, plus per-domain path resolution.
//!
//! Every key is optional except `data_type` (which may instead come from the
//! `LEI_DATA_TYPE` environment variable or a caller override). Relative paths
//! are resolved against the config file's directory and normalized, so a
//! written-back config loads to an equal value.

use serde::{Deserialize, Serialize};
use std::env;
use std::fmt;
use std::path::{Component, Path, PathBuf};
use thiserror::Error;

/// Environment variable that overrides `data_type` from the config file.
pub const ENV_DATA_TYPE: &str = "LEI_DATA_TYPE";

pub const DEFAULT_BATCH_SIZE_K: usize = 2;
pub const DEFAULT_MAX_FIX_ATTEMPTS: u32 = 2;
pub const DEFAULT_LLM_CALL_TIMEOUT_S: u64 = 120;
pub const DEFAULT_VALIDATION_EXEC_TIMEOUT_S: u64 = 120;
pub const DEFAULT_SAMPLING_INTERVAL_S: u64 = 5;
pub const DEFAULT_WINDOWS_MIN: [u32; 4] = [1, 5, 10, 30];
pub const DEFAULT_POLL_INTERVAL_S: u64 = 600;
pub const DEFAULT_CPU_MAX_PCT: f64 = 80.0;
pub const DEFAULT_MEM_MIN_AVAILABLE_MB: f64 = 256.0;
pub const DEFAULT_SCRIPT_RUNTIME_CMD: &str = "python3 {script} {data}";
pub const DEFAULT_SCRIPT_EXTENSION: &str = ".py";
pub const DEFAULT_BASE_URL: &str = "http://127.0.0.1:11434";
pub const DEFAULT_MODEL_ID: &str = "qwen2.5-coder:7b";

/// Files every domain directory must provide.
pub const REQUIRED_DOMAIN_FILES: [&str; 3] = ["sample_data.csv", "meta_data.json", "context.txt"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    MissingFile(PathBuf),
    #[error("could not parse {path}: {message}")]
    ParseError { path: PathBuf, message: String },
    #[error("config invariant violated for `{field}`: {message}")]
    InvariantViolation { field: &'static str, message: String },
    #[error("data type `{0}` not found under the data root")]
    DomainNotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where generated instructions are sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    /// POST to a live HTTP endpoint.
    Live,
    /// Replay canned responses from a fixture directory.
    Fixture,
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendMode::Live => f.write_str("live"),
            BackendMode::Fixture => f.write_str("fixture"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmBackendConfig {
    pub base_url: String,
    pub model_id: String,
    pub mode: BackendMode,
    /// Required when `mode` is `fixture`.
    pub fixture_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Active sensor domain; selects `data_root/{data_type}`.
    pub data_type: String,
    pub data_root: PathBuf,
    pub prompts_root: PathBuf,
    pub output_root: PathBuf,
    pub logs_root: PathBuf,
    pub backend: LlmBackendConfig,
    /// Tasks per code-generation batch.
    pub batch_size_k: usize,
    /// Bounded repair attempts per failing script.
    pub max_fix_attempts: u32,
    pub llm_call_timeout_s: u64,
    pub validation_exec_timeout_s: u64,
    pub sampling_interval_s: u64,
    /// Averaging windows for the resource summary, minutes, strictly increasing.
    pub windows_min: Vec<u32>,
    pub poll_interval_s: u64,
    /// Scheduler gate: 1-minute CPU average must stay at or below this.
    pub cpu_max_pct: f64,
    /// Scheduler gate: available memory must stay at or above this.
    pub mem_min_available_mb: f64,
    /// Command template used to run a generated script; must contain the
    /// `{script}` and `{data}` placeholders.
    pub script_runtime_cmd: String,
    pub script_extension: String,
}

/// Caller-level overrides applied before invariants are checked. The CLI maps
/// its flags here; the precedence is file < environment < override.
#[derive(Debug, Default, Clone)]
pub struct ConfigOverrides {
    pub data_type: Option<String>,
    /// Switches the backend to fixture mode rooted at this directory.
    pub fixture_dir: Option<PathBuf>,
}

/// On-disk shape: every key optional, flat, no tables.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    data_type: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_root: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompts_root: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_root: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logs_root: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend_base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend_model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend_mode: Option<BackendMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backend_fixture_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_fix_attempts: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    llm_call_timeout_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_exec_timeout_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sampling_interval_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    windows_min: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    poll_interval_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cpu_max_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mem_min_available_mb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    script_runtime_cmd: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    script_extension: Option<String>,
}

/// Load a config file, applying defaults for absent keys and the
/// `LEI_DATA_TYPE` environment override.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    load_config_with(path, &ConfigOverrides::default())
}

/// [`load_config`] with caller overrides (used by the CLI and bindings).
pub fn load_config_with(
    path: &Path,
    overrides: &ConfigOverrides,
) -> Result<PipelineConfig, ConfigError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let doc: ConfigDoc = toml::from_str(&text).map_err(|e| ConfigError::ParseError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = base_dir(path)?;
    build(doc, &base, overrides)
}

fn base_dir(config_path: &Path) -> Result<PathBuf, ConfigError> {
    let parent = match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok(normalize_path(&env::current_dir()?, &parent))
}

fn build(
    doc: ConfigDoc,
    base: &Path,
    overrides: &ConfigOverrides,
) -> Result<PipelineConfig, ConfigError> {
    let env_data_type = env::var(ENV_DATA_TYPE).ok().filter(|s| !s.is_empty());
    let data_type = overrides
        .data_type
        .clone()
        .or(env_data_type)
        .or(doc.data_type)
        .ok_or_else(|| ConfigError::InvariantViolation {
            field: "data_type",
            message: format!("missing (set it in the config file or via {ENV_DATA_TYPE})"),
        })?;

    let mut mode = doc.backend_mode.unwrap_or(BackendMode::Live);
    let mut fixture_dir = doc
        .backend_fixture_dir
        .map(|p| normalize_path(base, Path::new(&p)));
    if let Some(dir) = &overrides.fixture_dir {
        mode = BackendMode::Fixture;
        fixture_dir = Some(normalize_path(base, dir));
    }

    let cfg = PipelineConfig {
        data_type,
        data_root: normalize_path(base, Path::new(doc.data_root.as_deref().unwrap_or("data"))),
        prompts_root: normalize_path(base, Path::new(doc.prompts_root.as_deref().unwrap_or("prompts"))),
        output_root: normalize_path(base, Path::new(doc.output_root.as_deref().unwrap_or("output"))),
        logs_root: normalize_path(base, Path::new(doc.logs_root.as_deref().unwrap_or("logs"))),
        backend: LlmBackendConfig {
            base_url: doc.backend_base_url.unwrap_or_else(|| DEFAULT_BASE_URL.to_string()),
            model_id: doc.backend_model_id.unwrap_or_else(|| DEFAULT_MODEL_ID.to_string()),
            mode,
            fixture_dir,
        },
        batch_size_k: doc.batch_size_k.unwrap_or(DEFAULT_BATCH_SIZE_K),
        max_fix_attempts: doc.max_fix_attempts.unwrap_or(DEFAULT_MAX_FIX_ATTEMPTS),
        llm_call_timeout_s: doc.llm_call_timeout_s.unwrap_or(DEFAULT_LLM_CALL_TIMEOUT_S),
        validation_exec_timeout_s: doc
            .validation_exec_timeout_s
            .unwrap_or(DEFAULT_VALIDATION_EXEC_TIMEOUT_S),
        sampling_interval_s: doc.sampling_interval_s.unwrap_or(DEFAULT_SAMPLING_INTERVAL_S),
        windows_min: doc.windows_min.unwrap_or_else(|| DEFAULT_WINDOWS_MIN.to_vec()),
        poll_interval_s: doc.poll_interval_s.unwrap_or(DEFAULT_POLL_INTERVAL_S),
        cpu_max_pct: doc.cpu_max_pct.unwrap_or(DEFAULT_CPU_MAX_PCT),
        mem_min_available_mb: doc
            .mem_min_available_mb
            .unwrap_or(DEFAULT_MEM_MIN_AVAILABLE_MB),
        script_runtime_cmd: doc
            .script_runtime_cmd
            .unwrap_or_else(|| DEFAULT_SCRIPT_RUNTIME_CMD.to_string()),
        script_extension: doc
            .script_extension
            .unwrap_or_else(|| DEFAULT_SCRIPT_EXTENSION.to_string()),
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &PipelineConfig) -> Result<(), ConfigError> {
    fn bad(field: &'static str, message: impl Into<String>) -> ConfigError {
        ConfigError::InvariantViolation { field, message: message.into() }
    }

    if cfg.batch_size_k < 1 {
        return Err(bad("batch_size_k", "must be at least 1"));
    }
    if cfg.llm_call_timeout_s == 0 {
        return Err(bad("llm_call_timeout_s", "must be positive"));
    }
    if cfg.validation_exec_timeout_s == 0 {
        return Err(bad("validation_exec_timeout_s", "must be positive"));
    }
    if cfg.sampling_interval_s == 0 {
        return Err(bad("sampling_interval_s", "must be positive"));
    }
    if cfg.poll_interval_s == 0 {
        return Err(bad("poll_interval_s", "must be positive"));
    }
    if cfg.windows_min.is_empty() {
        return Err(bad("windows_min", "must list at least one window"));
    }
    if !cfg.windows_min.windows(2).all(|w| w[0] < w[1]) || cfg.windows_min[0] == 0 {
        return Err(bad("windows_min", "windows must be positive and strictly increasing"));
    }
    if !(cfg.cpu_max_pct > 0.0 && cfg.cpu_max_pct <= 100.0) {
        return Err(bad("cpu_max_pct", "must be in (0, 100]"));
    }
    // Negated form on purpose: NaN must be rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(cfg.mem_min_available_mb >= 0.0) {
        return Err(bad("mem_min_available_mb", "must be non-negative"));
    }
    for placeholder in ["{script}", "{data}"] {
        if !cfg.script_runtime_cmd.contains(placeholder) {
            return Err(bad(
                "script_runtime_cmd",
                format!("must contain the `{placeholder}` placeholder"),
            ));
        }
    }
    if !cfg.script_extension.starts_with('.') {
        return Err(bad("script_extension", "must start with a dot"));
    }
    if cfg.backend.mode == BackendMode::Fixture && cfg.backend.fixture_dir.is_none() {
        return Err(bad("backend_fixture_dir", "required when backend_mode = \"fixture\""));
    }

    let domain_dir = cfg.data_root.join(&cfg.data_type);
    if !domain_dir.is_dir() {
        return Err(bad(
            "data_type",
            format!("domain directory {} does not exist", domain_dir.display()),
        ));
    }
    for required in REQUIRED_DOMAIN_FILES {
        if !domain_dir.join(required).is_file() {
            return Err(bad(
                "data_type",
                format!("{} missing under {}", required, domain_dir.display()),
            ));
        }
    }
    Ok(())
}

/// Serialize a config back to the flat document format. Loading the written
/// file yields an equal [`PipelineConfig`].
pub fn write_config(cfg: &PipelineConfig, path: &Path) -> Result<(), ConfigError> {
    let doc = ConfigDoc {
        data_type: Some(cfg.data_type.clone()),
        data_root: Some(cfg.data_root.to_string_lossy().into_owned()),
        prompts_root: Some(cfg.prompts_root.to_string_lossy().into_owned()),
        output_root: Some(cfg.output_root.to_string_lossy().into_owned()),
        logs_root: Some(cfg.logs_root.to_string_lossy().into_owned()),
        backend_base_url: Some(cfg.backend.base_url.clone()),
        backend_model_id: Some(cfg.backend.model_id.clone()),
        backend_mode: Some(cfg.backend.mode),
        backend_fixture_dir: cfg
            .backend
            .fixture_dir
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned()),
        batch_size_k: Some(cfg.batch_size_k),
        max_fix_attempts: Some(cfg.max_fix_attempts),
        llm_call_timeout_s: Some(cfg.llm_call_timeout_s),
        validation_exec_timeout_s: Some(cfg.validation_exec_timeout_s),
        sampling_interval_s: Some(cfg.sampling_interval_s),
        windows_min: Some(cfg.windows_min.clone()),
        poll_interval_s: Some(cfg.poll_interval_s),
        cpu_max_pct: Some(cfg.cpu_max_pct),
        mem_min_available_mb: Some(cfg.mem_min_available_mb),
        script_runtime_cmd: Some(cfg.script_runtime_cmd.clone()),
        script_extension: Some(cfg.script_extension.clone()),
    };
    let text = toml::to_string(&doc).map_err(|e| ConfigError::ParseError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    crate::fsutil::atomic_write(path, text.as_bytes())?;
    Ok(())
}

/// Everything path-like the pipeline touches for one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainPaths {
    pub domain_dir: PathBuf,
    pub sample: PathBuf,
    pub metadata: PathBuf,
    pub context: PathBuf,
    pub tasks_list: PathBuf,
    /// False when no task list exists yet (first run against the domain).
    pub tasks_list_present: bool,
    pub new_tasks: PathBuf,
    pub raw_data: PathBuf,
    /// Generated scripts land here: `output_root/{data_type}`.
    pub scripts_dir: PathBuf,
    pub repository_dir: PathBuf,
    pub summaries_dir: PathBuf,
    /// Per-run result documents land here.
    pub results_dir: PathBuf,
}

/// Resolve the domain's file layout from a validated config.
pub fn resolve_domain_paths(cfg: &PipelineConfig) -> Result<DomainPaths, ConfigError> {
    let domain_dir = cfg.data_root.join(&cfg.data_type);
    if !domain_dir.is_dir() {
        return Err(ConfigError::DomainNotFound(cfg.data_type.clone()));
    }
    let out = cfg.output_root.join(&cfg.data_type);
    let tasks_list = domain_dir.join("tasks_list.json");
    Ok(DomainPaths {
        sample: domain_dir.join("sample_data.csv"),
        metadata: domain_dir.join("meta_data.json"),
        context: domain_dir.join("context.txt"),
        tasks_list_present: tasks_list.is_file(),
        tasks_list,
        new_tasks: domain_dir.join("new_tasks.json"),
        raw_data: domain_dir.join("raw_data.csv"),
        scripts_dir: out.clone(),
        repository_dir: out.join("repository"),
        summaries_dir: out.join("summaries"),
        results_dir: out,
        domain_dir,
    })
}

/// Lexically normalize `path`, resolving it against `base` when relative.
/// Unlike `fs::canonicalize` this never touches the filesystem, so it also
/// works for output directories that do not exist yet.
pub fn normalize_path(base: &Path, path: &Path) -> PathBuf {
    let joined = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    let mut out = PathBuf::new();
    for comp in joined.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::sync::Mutex;

    /// Serializes tests that read or write the process environment.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    fn write_domain(root: &Path, data_type: &str) {
        let dir = root.join("data").join(data_type);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("sample_data.csv"), "timestamp,v\n2025-01-01T00:00:00Z,1\n").unwrap();
        fs::write(dir.join("meta_data.json"), "{\"sensor\":\"test\"}").unwrap();
        fs::write(dir.join("context.txt"), "test context").unwrap();
    }

    fn write_config_file(root: &Path, body: &str) -> PathBuf {
        let path = root.join("config.toml");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(dir.path(), "data_type = \"air_quality\"\n");
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.data_type, "air_quality");
        assert_eq!(cfg.batch_size_k, 2);
        assert_eq!(cfg.max_fix_attempts, 2);
        assert_eq!(cfg.llm_call_timeout_s, 120);
        assert_eq!(cfg.validation_exec_timeout_s, 120);
        assert_eq!(cfg.sampling_interval_s, 5);
        assert_eq!(cfg.windows_min, vec![1, 5, 10, 30]);
        assert_eq!(cfg.poll_interval_s, 600);
        assert_eq!(cfg.cpu_max_pct, 80.0);
        assert_eq!(cfg.mem_min_available_mb, 256.0);
        assert_eq!(cfg.script_runtime_cmd, "python3 {script} {data}");
        assert_eq!(cfg.backend.mode, BackendMode::Live);
        assert!(cfg.data_root.is_absolute(), "paths are made absolute");
    }

    #[test]
    fn missing_file_is_its_own_error() {
        let _guard = ENV_LOCK.lock().unwrap();
        let err = load_config(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)));
    }

    #[test]
    fn unparseable_file_reports_parse_error() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_config_file(dir.path(), "data_type = [not closed\n");
        let err = load_config(&path).unwrap_err();
        assert!(matches!(err, ConfigError::ParseError { .. }));
    }

    #[test]
    fn unknown_key_is_a_parse_error() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(
            dir.path(),
            "data_type = \"air_quality\"\nbatch_sze_k = 3\n",
        );
        let err = load_config(&path).unwrap_err();
        match err {
            ConfigError::ParseError { message, .. } => assert!(message.contains("batch_sze_k")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_windows_are_rejected() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(
            dir.path(),
            "data_type = \"air_quality\"\nwindows_min = [5, 1, 30]\n",
        );
        let err = load_config(&path).unwrap_err();
        match err {
            ConfigError::InvariantViolation { field, .. } => assert_eq!(field, "windows_min"),
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn env_var_overrides_file_data_type() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        write_domain(dir.path(), "soil");
        let path = write_config_file(dir.path(), "data_type = \"air_quality\"\n");
        env::set_var(ENV_DATA_TYPE, "soil");
        let cfg = load_config(&path);
        env::remove_var(ENV_DATA_TYPE);
        assert_eq!(cfg.unwrap().data_type, "soil");
    }

    #[test]
    fn override_beats_environment() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "wind");
        let path = write_config_file(dir.path(), "data_type = \"missing_domain\"\n");
        let overrides = ConfigOverrides { data_type: Some("wind".into()), ..Default::default() };
        let cfg = load_config_with(&path, &overrides).unwrap();
        assert_eq!(cfg.data_type, "wind");
    }

    #[test]
    fn missing_domain_files_violate_data_type_invariant() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let domain = dir.path().join("data").join("air_quality");
        fs::create_dir_all(&domain).unwrap();
        fs::write(domain.join("sample_data.csv"), "timestamp,v\n").unwrap();
        let path = write_config_file(dir.path(), "data_type = \"air_quality\"\n");
        let err = load_config(&path).unwrap_err();
        match err {
            ConfigError::InvariantViolation { field, .. } => assert_eq!(field, "data_type"),
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn written_back_config_loads_equal() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(
            dir.path(),
            "data_type = \"air_quality\"\nbatch_size_k = 3\ncpu_max_pct = 55.5\n",
        );
        let first = load_config(&path).unwrap();
        let copy = dir.path().join("copy.toml");
        write_config(&first, &copy).unwrap();
        let second = load_config(&copy).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn fixture_mode_requires_fixture_dir() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(
            dir.path(),
            "data_type = \"air_quality\"\nbackend_mode = \"fixture\"\n",
        );
        let err = load_config(&path).unwrap_err();
        assert!(matches!(err, ConfigError::InvariantViolation { field: "backend_fixture_dir", .. }));
    }

    #[test]
    fn domain_paths_point_into_roots() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(dir.path(), "data_type = \"air_quality\"\n");
        let cfg = load_config(&path).unwrap();
        let paths = resolve_domain_paths(&cfg).unwrap();
        assert!(paths.sample.ends_with("data/air_quality/sample_data.csv"));
        assert!(paths.repository_dir.ends_with("output/air_quality/repository"));
        assert!(paths.summaries_dir.ends_with("output/air_quality/summaries"));
        assert!(!paths.tasks_list_present);
    }

    #[test]
    fn unknown_domain_is_domain_not_found() {
        let _guard = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_domain(dir.path(), "air_quality");
        let path = write_config_file(dir.path(), "data_type = \"air_quality\"\n");
        let mut cfg = load_config(&path).unwrap();
        cfg.data_type = "vanished".into();
        let err = resolve_domain_paths(&cfg).unwrap_err();
        assert!(matches!(err, ConfigError::DomainNotFound(name) if name == "vanished"));
    }

    #[test]
    fn normalize_path_is_lexical() {
        let base = Path::new("/work/project");
        assert_eq!(normalize_path(base, Path::new("data/../logs")), PathBuf::from("/work/project/logs"));
        assert_eq!(normalize_path(base, Path::new("/abs/./x")), PathBuf::from("/abs/x"));
    }
}
