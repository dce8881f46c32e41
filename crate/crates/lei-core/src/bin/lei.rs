//! `lei` — drive the edge pipeline from the command line: full runs, the
//! individual steps, ingestion polling, resource monitoring, and report
//! recompilation.

use clap::{Parser, Subcommand};
use lei_core::clock::{Clock, SystemClock, TestClock};
use lei_core::config::{load_config_with, ConfigOverrides};
use lei_core::ingestion::{
    extract_sample, poll_source, HttpSource, PayloadSource, ReplaySource, SourceSpec,
};
use lei_core::pipeline::{MonitorMode, Pipeline, PipelineOptions, StepStatus};
use lei_core::resource_monitor::{FixedProbe, RawReading, ResourceProbe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "lei", version, about = "Edge-side analytic pipeline driven by a remote LLM")]
struct Cli {
    /// Path to the TOML config file.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,

    /// Override the active sensor domain for this invocation.
    #[arg(long, global = true)]
    data_type: Option<String>,

    /// Serve model responses from this fixture directory instead of HTTP.
    #[arg(long, global = true)]
    fixture_dir: Option<PathBuf>,

    /// Write the report to this path instead of the default location.
    #[arg(long, global = true)]
    report_out: Option<PathBuf>,

    /// Deterministic clock: RFC 3339 start time. Testing only.
    #[arg(long, global = true, hide = true)]
    test_clock: Option<String>,

    /// Milliseconds the deterministic clock advances per reading.
    #[arg(long, global = true, hide = true, default_value_t = 100)]
    test_clock_tick_ms: i64,

    /// Fixed resource readings, "cpu=12.5,mem_used=37.5,mem_avail=1843.2[,cores=4]".
    /// Testing only.
    #[arg(long, global = true, hide = true)]
    test_probe: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one full pipeline run (all four steps) and refresh the report.
    Run,
    /// Poll the upstream source into the raw store, or rebuild the sample.
    Ingest {
        /// Read payloads from JSON files in this directory instead of HTTP.
        #[arg(long)]
        replay_dir: Option<PathBuf>,
        /// Poll exactly once, then exit.
        #[arg(long)]
        once: bool,
        /// Poll this many times, then exit.
        #[arg(long, conflicts_with = "once")]
        ticks: Option<u32>,
        /// After polling, rebuild sample_data.csv from the last N minutes of
        /// the raw store.
        #[arg(long, value_name = "MINUTES")]
        extract_sample_min: Option<i64>,
    },
    /// Sample CPU/memory and refresh the windowed summary file.
    Monitor {
        /// Take one sample, then exit (the default).
        #[arg(long)]
        once: bool,
        /// Keep sampling on the configured interval for this many seconds.
        #[arg(long, conflicts_with = "once")]
        duration_s: Option<u64>,
    },
    /// Step 1 only: propose tasks and merge them into the task list.
    TaskGen,
    /// Step 2 only: generate scripts for the latest proposals.
    CodeGen,
    /// Step 3 only: validate generated scripts and admit passes.
    Validate,
    /// Step 4 only: run the whole validated repository under the resource gate.
    Execute,
    /// Recompile the report from the persisted logs.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8, Box<dyn std::error::Error>> {
    let overrides = ConfigOverrides {
        data_type: cli.data_type.clone(),
        fixture_dir: cli.fixture_dir.clone(),
    };
    let cfg = load_config_with(&cli.config, &overrides)?;

    let clock: Arc<dyn Clock> = match &cli.test_clock {
        Some(start) => {
            let start = chrono::DateTime::parse_from_rfc3339(start)
                .map_err(|e| format!("bad --test-clock value: {e}"))?
                .with_timezone(&chrono::Utc);
            Arc::new(TestClock::new(start, cli.test_clock_tick_ms))
        }
        None => Arc::new(SystemClock),
    };
    let probe: Option<Box<dyn ResourceProbe>> = match &cli.test_probe {
        Some(s) => Some(Box::new(parse_probe(s)?)),
        None => None,
    };
    let deterministic = cli.test_clock.is_some() || cli.test_probe.is_some();
    let options = PipelineOptions {
        monitor_mode: if deterministic { MonitorMode::StepTicks } else { MonitorMode::Background },
        report_out: cli.report_out.clone(),
    };

    match &cli.command {
        Command::Run => {
            let mut pipeline = Pipeline::new(cfg, clock, None, probe, options)?;
            let outcome = pipeline.run()?;
            for step in &outcome.manifest.steps {
                let status = match step.status {
                    StepStatus::Ok => "ok",
                    StepStatus::Failed => "FAILED",
                    StepStatus::Skipped => "skipped",
                };
                match (&step.timing, &step.failure) {
                    (Some(t), None) => {
                        println!("step {}: {status} ({:.3}s)", step.step, t.duration_s)
                    }
                    (Some(t), Some(why)) => {
                        println!("step {}: {status} ({:.3}s) — {why}", step.step, t.duration_s)
                    }
                    _ => println!("step {}: {status}", step.step),
                }
            }
            let c = outcome.manifest.counts;
            println!(
                "run {}: proposed={} generated={} passed={} failed={} executed_ok={}",
                outcome.manifest.run_id,
                c.tasks_proposed,
                c.scripts_generated,
                c.passed_validation,
                c.failed_validation,
                c.executed_ok
            );
            println!("report: {}", outcome.report_path.display());
            Ok(outcome.exit_code() as u8)
        }
        Command::Ingest { replay_dir, once, ticks, extract_sample_min } => {
            let paths = lei_core::config::resolve_domain_paths(&cfg)?;
            let spec_path = paths.domain_dir.join("source.json");
            let polls = match (once, ticks) {
                (true, _) => 1,
                (false, Some(n)) => *n,
                (false, None) => {
                    if extract_sample_min.is_some() {
                        0
                    } else {
                        1
                    }
                }
            };
            if polls > 0 {
                let spec = SourceSpec::load(&spec_path)?;
                let mut source: Box<dyn PayloadSource> = match replay_dir {
                    Some(dir) => Box::new(ReplaySource::new(dir)?),
                    None => Box::new(HttpSource::new(
                        &spec,
                        std::time::Duration::from_secs(cfg.llm_call_timeout_s),
                    )),
                };
                for i in 0..polls {
                    if i > 0 && replay_dir.is_none() {
                        std::thread::sleep(std::time::Duration::from_secs(spec.poll_interval_s));
                    }
                    let rows =
                        poll_source(&spec, &paths.raw_data, source.as_mut(), clock.as_ref())?;
                    println!("raw store now holds {rows} rows");
                }
            }
            if let Some(minutes) = extract_sample_min {
                let sample = extract_sample(&paths.raw_data, chrono::Duration::minutes(*minutes))?;
                lei_core::fsutil::atomic_write(&paths.sample, sample.as_bytes())?;
                println!("sample rebuilt from the last {minutes} minutes: {}", paths.sample.display());
            }
            Ok(0)
        }
        Command::Monitor { once: _, duration_s } => {
            let pipeline = Pipeline::new(cfg.clone(), clock, None, probe, options)?;
            let budget = duration_s.unwrap_or(0);
            let started = std::time::Instant::now();
            loop {
                let sample = pipeline.monitor_tick()?;
                println!(
                    "cpu={:.1}% mem_used={:.1}% mem_available={:.1}MB",
                    sample.cpu_pct, sample.mem_used_pct, sample.mem_available_mb
                );
                if started.elapsed().as_secs() >= budget {
                    break;
                }
                std::thread::sleep(std::time::Duration::from_secs(cfg.sampling_interval_s));
            }
            println!("summary: {}", pipeline.summary_path().display());
            Ok(0)
        }
        Command::TaskGen => {
            let mut pipeline = Pipeline::new(cfg, clock, None, probe, options)?;
            let outcome = pipeline.task_gen_once()?;
            println!("added {} new tasks ({} total)", outcome.added.len(), outcome.merged_total);
            for task in &outcome.added {
                println!("  {}: {}", task.name, task.description);
            }
            Ok(0)
        }
        Command::CodeGen => {
            let mut pipeline = Pipeline::new(cfg, clock, None, probe, options)?;
            let outcome = pipeline.code_gen_once()?;
            println!("generated {} scripts, {} failures", outcome.scripts.len(), outcome.failures);
            for script in &outcome.scripts {
                println!("  {}", script.path.display());
            }
            Ok(0)
        }
        Command::Validate => {
            let mut pipeline = Pipeline::new(cfg, clock, None, probe, options)?;
            let outcome = pipeline.validate_once()?;
            let passed = outcome.passed.len();
            let total = outcome.records.len();
            for record in &outcome.records {
                println!("  {}: {:?} (attempts {})", record.task_name, record.status, record.attempts_used);
            }
            println!("{passed}/{total} scripts validated");
            Ok(0)
        }
        Command::Execute => {
            let mut pipeline = Pipeline::new(cfg, clock, None, probe, options)?;
            let records = pipeline.execute_once()?;
            for record in &records {
                println!("  {}: {} ({}ms)", record.task_name, record.status, record.duration_ms);
            }
            println!("{} scripts attempted", records.len());
            Ok(0)
        }
        Command::Report => {
            let pipeline = Pipeline::new(cfg, clock, None, probe, options)?;
            let (report, path) = pipeline.report_only()?;
            let agg = &report.aggregate;
            println!("runs covered: {}", report.runs.len());
            if let Some(r) = agg.reliability {
                println!("system reliability: {r:.4}");
            }
            if let Some(v) = &agg.validation_success_rate {
                println!("validation success rate: {:.4} over {} runs", v.mean_rate, v.eligible_runs);
            }
            if let Some(e) = &agg.execution_success_rate {
                println!("execution success rate: {:.4} ({} ok)", e.rate, e.successes);
            }
            println!("report: {}", path.display());
            Ok(0)
        }
    }
}

fn parse_probe(s: &str) -> Result<FixedProbe, String> {
    let mut cpu = None;
    let mut mem_used = None;
    let mut mem_avail = None;
    let mut cores = 4u64;
    for part in s.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("bad --test-probe segment {part:?}, expected key=value"))?;
        match key.trim() {
            "cpu" => cpu = Some(value.trim().parse().map_err(|e| format!("cpu: {e}"))?),
            "mem_used" => {
                mem_used = Some(value.trim().parse().map_err(|e| format!("mem_used: {e}"))?)
            }
            "mem_avail" => {
                mem_avail = Some(value.trim().parse().map_err(|e| format!("mem_avail: {e}"))?)
            }
            "cores" => cores = value.trim().parse().map_err(|e| format!("cores: {e}"))?,
            other => return Err(format!("unknown --test-probe key {other:?}")),
        }
    }
    Ok(FixedProbe(RawReading {
        cpu_pct: cpu.ok_or("missing cpu= in --test-probe")?,
        mem_used_pct: mem_used.ok_or("missing mem_used= in --test-probe")?,
        mem_available_mb: mem_avail.ok_or("missing mem_avail= in --test-probe")?,
        cpu_cores: cores,
    }))
}
