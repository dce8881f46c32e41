//! Shared scaffolding for the integration tests: throwaway workspaces with a
//! complete domain layout, a programmatic fixture-backend builder, and
//! deterministic clock/probe wiring.

#![allow(dead_code)]

use chrono::{DateTime, TimeZone, Utc};
use lei_core::clock::TestClock;
use lei_core::config::{load_config, PipelineConfig};
use lei_core::pipeline::{MonitorMode, Pipeline, PipelineOptions};
use lei_core::resource_monitor::{FixedProbe, RawReading};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Minimal python script that reads the CSV and prints one JSON object.
pub const GOOD_PY: &str = "import json, sys\nrows = sum(1 for _ in open(sys.argv[1])) - 1\nprint(json.dumps({\"rows\": rows}))\n";
/// Always fails with a non-zero exit and no stdout.
pub const BAD_PY: &str = "import sys\nsys.stderr.write(\"boom\\n\")\nsys.exit(1)\n";
/// Sleeps far past any sane timeout.
pub const SLEEP_PY: &str = "import time\ntime.sleep(30)\n";

pub const SAMPLE_CSV: &str = "timestamp,aqi,pm2_5\n2025-10-28 17:24:12,2,11.48\n2025-10-28 17:24:17,2,11.57\n2025-10-28 17:24:22,2,11.63\n";

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 10, 28, 17, 24, 12).unwrap()
}

pub fn test_clock() -> Arc<TestClock> {
    Arc::new(TestClock::new(start_time(), 100))
}

pub fn good_reading() -> RawReading {
    RawReading { cpu_pct: 12.5, mem_used_pct: 37.5, mem_available_mb: 1843.2, cpu_cores: 4 }
}

/// Builds a fixture directory: entries paired with auto-named response files.
#[derive(Default)]
pub struct FixtureBuilder {
    entries: Vec<Value>,
    files: Vec<(String, String)>,
    seq: u32,
}

impl FixtureBuilder {
    pub fn new() -> Self {
        FixtureBuilder::default()
    }

    /// Add one manifest entry; `entry` carries the matching fields
    /// (step/batch/attempt/uses/stall_s) and `response` the reply body.
    pub fn add(&mut self, mut entry: Value, response: &str) -> &mut Self {
        let file = format!("resp_{:04}.txt", self.seq);
        self.seq += 1;
        entry["response_file"] = json!(file);
        self.files.push((file, response.to_string()));
        self.entries.push(entry);
        self
    }

    pub fn write(&self, dir: &Path) {
        std::fs::create_dir_all(dir).unwrap();
        for (name, body) in &self.files {
            std::fs::write(dir.join(name), body).unwrap();
        }
        let manifest = json!({ "entries": self.entries });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())
            .unwrap();
    }
}

pub struct TestWorkspace {
    pub dir: tempfile::TempDir,
    pub cfg: PipelineConfig,
}

impl TestWorkspace {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn logs(&self) -> PathBuf {
        self.root().join("logs")
    }

    pub fn output(&self) -> PathBuf {
        self.root().join("output/air_quality")
    }

    pub fn domain(&self) -> PathBuf {
        self.root().join("data/air_quality")
    }
}

/// Create a complete throwaway workspace: an `air_quality` domain, the real
/// prompt templates copied from the repository, the given fixture, and a
/// fixture-mode config.
pub fn build_workspace(fixture: &FixtureBuilder) -> TestWorkspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let domain = root.join("data/air_quality");
    std::fs::create_dir_all(&domain).unwrap();
    std::fs::write(domain.join("sample_data.csv"), SAMPLE_CSV).unwrap();
    std::fs::write(
        domain.join("meta_data.json"),
        "{\"sensor\": \"test-unit\", \"location\": {\"site\": \"bench\"}}",
    )
    .unwrap();
    std::fs::write(domain.join("context.txt"), "bench deployment for integration tests\n")
        .unwrap();

    let prompts_src = repo_root().join("prompts");
    let prompts_dst = root.join("prompts");
    std::fs::create_dir_all(&prompts_dst).unwrap();
    for name in ["task_generation.txt", "code_generation.txt", "validation_fix.txt"] {
        std::fs::copy(prompts_src.join(name), prompts_dst.join(name)).unwrap();
    }

    fixture.write(&root.join("fixtures"));

    std::fs::write(
        root.join("config.toml"),
        "data_type = \"air_quality\"\nbackend_mode = \"fixture\"\nbackend_fixture_dir = \"fixtures\"\n",
    )
    .unwrap();
    let cfg = load_config(&root.join("config.toml")).unwrap();
    TestWorkspace { dir, cfg }
}

/// Deterministic pipeline over the workspace: test clock, fixed probe,
/// step-boundary resource ticks.
pub fn make_pipeline(ws: &TestWorkspace) -> Pipeline {
    make_pipeline_with_clock(ws, test_clock())
}

pub fn make_pipeline_with_clock(ws: &TestWorkspace, clock: Arc<TestClock>) -> Pipeline {
    Pipeline::new(
        ws.cfg.clone(),
        clock,
        None,
        Some(Box::new(FixedProbe(good_reading()))),
        PipelineOptions { monitor_mode: MonitorMode::StepTicks, report_out: None },
    )
    .unwrap()
}

/// JSON body for one task-generation reply: 5 tasks named `r{run}_t1..t5`.
pub fn five_tasks(run: u32) -> String {
    let tasks: Vec<Value> = (1..=5)
        .map(|i| {
            json!({
                "name": format!("r{run}_t{i}"),
                "description": format!("bench task {i} for run {run}")
            })
        })
        .collect();
    serde_json::to_string_pretty(&tasks).unwrap()
}

/// JSON body for one code-generation reply covering `names`, with the given
/// source per task.
pub fn code_reply(entries: &[(&str, &str)]) -> String {
    let items: Vec<Value> = entries
        .iter()
        .map(|(name, code)| json!({"name": name, "description": "bench", "code": code}))
        .collect();
    serde_json::to_string_pretty(&items).unwrap()
}
