//! Subprocess sandbox for generated scripts: scrubbed environment, throwaway
//! working directory, capped captured output, and a hard kill at the timeout.

use serde_json::Value;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

/// Captured stdout/stderr are truncated beyond this many bytes (the child is
/// still drained so it cannot block on a full pipe).
pub const OUTPUT_CAP_BYTES: usize = 1024 * 1024;

/// Environment variables inherited by sandboxed children; everything else is
/// cleared.
pub const ENV_ALLOWLIST: [&str; 5] = ["PATH", "HOME", "LANG", "LC_ALL", "TZ"];

/// How the child ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxExit {
    /// Exit status zero.
    Success,
    /// Non-zero exit status.
    NonZero(i32),
    /// Killed at the timeout.
    TimedOut,
    /// The runtime command could not be started.
    SpawnError,
}

/// Everything observed about one sandboxed execution.
#[derive(Debug, Clone)]
pub struct SandboxResult {
    pub exit: SandboxExit,
    pub spawn_error: Option<String>,
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    /// Real elapsed wall seconds (monotonic), independent of the pipeline
    /// clock; when `exit` is `TimedOut` this is at least the timeout.
    pub duration_s: f64,
    /// Present iff the child succeeded and its whole stdout parses as JSON.
    pub parsed_output: Option<Value>,
}

impl SandboxResult {
    pub fn succeeded(&self) -> bool {
        self.exit == SandboxExit::Success
    }
}

/// Runs scripts through a configurable runtime command with `{script}` and
/// `{data}` placeholders. Execution counting and concurrency tracking are
/// per-instance so parallel tests do not interfere.
pub struct Sandbox {
    runtime_cmd: String,
    timeout: Duration,
    exec_count: AtomicU64,
    active: AtomicUsize,
    peak_active: AtomicUsize,
}

impl Sandbox {
    pub fn new(runtime_cmd: &str, timeout: Duration) -> Self {
        Sandbox {
            runtime_cmd: runtime_cmd.to_string(),
            timeout,
            exec_count: AtomicU64::new(0),
            active: AtomicUsize::new(0),
            peak_active: AtomicUsize::new(0),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Total number of executions attempted through this sandbox.
    pub fn exec_count(&self) -> u64 {
        self.exec_count.load(Ordering::SeqCst)
    }

    /// Highest number of concurrently running children observed.
    pub fn peak_concurrency(&self) -> usize {
        self.peak_active.load(Ordering::SeqCst)
    }

    /// Execute one script against one data file and wait for completion.
    pub fn run_script(&self, script: &Path, data: &Path) -> SandboxResult {
        self.exec_count.fetch_add(1, Ordering::SeqCst);
        let now_active = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_active.fetch_max(now_active, Ordering::SeqCst);
        let result = self.run_inner(script, data);
        self.active.fetch_sub(1, Ordering::SeqCst);
        result
    }

    fn run_inner(&self, script: &Path, data: &Path) -> SandboxResult {
        let script_str = script.to_string_lossy();
        let data_str = data.to_string_lossy();
        let argv: Vec<String> = self
            .runtime_cmd
            .split_whitespace()
            .map(|tok| tok.replace("{script}", &script_str).replace("{data}", &data_str))
            .collect();
        let started = Instant::now();

        let spawn_failure = |message: String, started: Instant| SandboxResult {
            exit: SandboxExit::SpawnError,
            spawn_error: Some(message),
            stdout: String::new(),
            stderr: String::new(),
            stdout_truncated: false,
            stderr_truncated: false,
            duration_s: started.elapsed().as_secs_f64(),
            parsed_output: None,
        };

        if argv.is_empty() {
            return spawn_failure("empty runtime command".into(), started);
        }
        let workdir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return spawn_failure(format!("workdir: {e}"), started),
        };

        let mut command = Command::new(&argv[0]);
        command
            .args(&argv[1..])
            .current_dir(workdir.path())
            .env_clear()
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for key in ENV_ALLOWLIST {
            if let Ok(value) = std::env::var(key) {
                command.env(key, value);
            }
        }

        let mut child = match command.spawn() {
            Ok(c) => c,
            Err(e) => return spawn_failure(format!("spawn {}: {e}", argv[0]), started),
        };

        let stdout_pipe = child.stdout.take().expect("stdout piped");
        let stderr_pipe = child.stderr.take().expect("stderr piped");
        let stdout_reader = std::thread::spawn(move || drain_capped(stdout_pipe));
        let stderr_reader = std::thread::spawn(move || drain_capped(stderr_pipe));

        let deadline = started + self.timeout;
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {
                    if Instant::now() >= deadline {
                        timed_out = true;
                        let _ = child.kill();
                        break child.wait().ok();
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(_) => {
                    let _ = child.kill();
                    break child.wait().ok();
                }
            }
        };

        let (stdout, stdout_truncated) = stdout_reader.join().unwrap_or_default();
        let (stderr, stderr_truncated) = stderr_reader.join().unwrap_or_default();
        let duration_s = started.elapsed().as_secs_f64();

        let exit = if timed_out {
            SandboxExit::TimedOut
        } else {
            match status {
                Some(s) if s.success() => SandboxExit::Success,
                Some(s) => SandboxExit::NonZero(s.code().unwrap_or(-1)),
                None => SandboxExit::NonZero(-1),
            }
        };
        let parsed_output = if exit == SandboxExit::Success {
            serde_json::from_str::<Value>(stdout.trim()).ok()
        } else {
            None
        };
        SandboxResult {
            exit,
            spawn_error: None,
            stdout,
            stderr,
            stdout_truncated,
            stderr_truncated,
            duration_s,
            parsed_output,
        }
    }
}

/// Read a pipe to EOF, keeping at most [`OUTPUT_CAP_BYTES`] bytes but always
/// draining so the child never stalls on a full pipe.
fn drain_capped(mut pipe: impl Read) -> (String, bool) {
    let mut kept: Vec<u8> = Vec::new();
    let mut truncated = false;
    let mut buf = [0u8; 8192];
    loop {
        match pipe.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                if kept.len() < OUTPUT_CAP_BYTES {
                    let room = OUTPUT_CAP_BYTES - kept.len();
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    if n > room {
                        truncated = true;
                    }
                } else {
                    truncated = true;
                }
            }
            Err(_) => break,
        }
    }
    (String::from_utf8_lossy(&kept).into_owned(), truncated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_script(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn data_file(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "timestamp,v").unwrap();
        writeln!(f, "2025-10-28T17:00:00Z,1").unwrap();
        path
    }

    #[test]
    fn success_with_json_stdout_is_parsed() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(
            dir.path(),
            "ok.py",
            "import json, sys\nprint(json.dumps({\"rows\": sum(1 for _ in open(sys.argv[1])) - 1}))\n",
        );
        let data = data_file(dir.path());
        let sandbox = Sandbox::new("python3 {script} {data}", Duration::from_secs(30));
        let result = sandbox.run_script(&script, &data);
        assert_eq!(result.exit, SandboxExit::Success);
        assert_eq!(result.parsed_output.unwrap()["rows"], serde_json::json!(1));
        assert_eq!(sandbox.exec_count(), 1);
    }

    #[test]
    fn non_json_stdout_gives_no_parsed_output() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "text.py", "print('just text')\n");
        let data = data_file(dir.path());
        let sandbox = Sandbox::new("python3 {script} {data}", Duration::from_secs(30));
        let result = sandbox.run_script(&script, &data);
        assert_eq!(result.exit, SandboxExit::Success);
        assert!(result.parsed_output.is_none());
    }

    #[test]
    fn nonzero_exit_is_reported_with_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "boom.py", "import sys\nraise ValueError('bad')\n");
        let data = data_file(dir.path());
        let sandbox = Sandbox::new("python3 {script} {data}", Duration::from_secs(30));
        let result = sandbox.run_script(&script, &data);
        assert_eq!(result.exit, SandboxExit::NonZero(1));
        assert!(result.stderr.contains("ValueError"));
        assert!(result.parsed_output.is_none());
    }

    #[test]
    fn runaway_script_is_killed_at_the_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "spin.py", "import time\ntime.sleep(600)\n");
        let data = data_file(dir.path());
        let timeout = Duration::from_millis(300);
        let sandbox = Sandbox::new("python3 {script} {data}", timeout);
        let wall = Instant::now();
        let result = sandbox.run_script(&script, &data);
        assert_eq!(result.exit, SandboxExit::TimedOut);
        assert!(result.duration_s >= timeout.as_secs_f64(), "reported duration covers the timeout");
        assert!(wall.elapsed() < Duration::from_secs(5), "kill is prompt");
    }

    #[test]
    fn spawn_error_is_not_a_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(dir.path(), "x.py", "print(1)\n");
        let data = data_file(dir.path());
        let sandbox = Sandbox::new("definitely-not-a-binary {script} {data}", Duration::from_secs(5));
        let result = sandbox.run_script(&script, &data);
        assert_eq!(result.exit, SandboxExit::SpawnError);
        assert!(result.spawn_error.unwrap().contains("definitely-not-a-binary"));
    }

    #[test]
    fn environment_is_scrubbed() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(
            dir.path(),
            "env.py",
            "import json, os\nprint(json.dumps({\"secret\": os.environ.get(\"LEI_TEST_SECRET\"), \"hash\": os.environ.get(\"PYTHONHASHSEED\")}))\n",
        );
        let data = data_file(dir.path());
        std::env::set_var("LEI_TEST_SECRET", "leak");
        let sandbox = Sandbox::new("python3 {script} {data}", Duration::from_secs(30));
        let result = sandbox.run_script(&script, &data);
        std::env::remove_var("LEI_TEST_SECRET");
        let output = result.parsed_output.unwrap();
        assert_eq!(output["secret"], serde_json::Value::Null);
        assert_eq!(output["hash"], serde_json::json!("0"));
    }

    #[test]
    fn oversized_output_is_truncated_without_hanging() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(
            dir.path(),
            "flood.py",
            "import sys\nsys.stdout.write('x' * (3 * 1024 * 1024))\n",
        );
        let data = data_file(dir.path());
        let sandbox = Sandbox::new("python3 {script} {data}", Duration::from_secs(30));
        let result = sandbox.run_script(&script, &data);
        assert_eq!(result.exit, SandboxExit::Success);
        assert!(result.stdout_truncated);
        assert_eq!(result.stdout.len(), OUTPUT_CAP_BYTES);
    }

    #[test]
    fn cwd_is_a_throwaway_directory() {
        let dir = tempfile::tempdir().unwrap();
        let script = write_script(
            dir.path(),
            "cwd.py",
            "import json, os\nopen('scratch.txt', 'w').write('x')\nprint(json.dumps({\"cwd\": os.getcwd()}))\n",
        );
        let data = data_file(dir.path());
        let sandbox = Sandbox::new("python3 {script} {data}", Duration::from_secs(30));
        let result = sandbox.run_script(&script, &data);
        let cwd = result.parsed_output.unwrap()["cwd"].as_str().unwrap().to_string();
        assert_ne!(Path::new(&cwd), dir.path(), "child does not run in the script's directory");
        assert!(!Path::new(&cwd).exists(), "workdir is cleaned up after the run");
    }
}
