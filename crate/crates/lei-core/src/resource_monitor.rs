//! Edge resource monitoring: CPU/memory probes, a bounded in-memory sample
//! ring, windowed utilization summaries for the scheduler gate, a step-tagged
//! sample ledger, and the per-run / cross-run utilization statistics.

use crate::clock::{ts_serde, Clock};
use crate::fsutil;
use crate::step::StepId;
use chrono::{DateTime, Duration as ChronoDuration, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Step-tagged sample ledger file name under the logs root.
pub const RESOURCE_SAMPLES_FILE: &str = "resource_samples.jsonl";
/// Latest windowed summary file name under the summaries directory.
pub const SUMMARY_FILE: &str = "resource_usage_summary.json";

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("resource probe unavailable: {0}")]
    ProbeUnavailable(String),
    #[error("cannot summarize an empty sample series")]
    EmptySeries,
    #[error("cannot aggregate zero runs")]
    EmptyRuns,
    #[error("aggregates mix different (model, step, property) keys")]
    MixedKey,
    #[error("malformed summary in {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One instantaneous reading, after clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    #[serde(with = "ts_serde")]
    pub timestamp: DateTime<Utc>,
    pub cpu_pct: f64,
    pub mem_used_pct: f64,
    pub mem_available_mb: f64,
}

/// What a probe hands back before clamping.
#[derive(Debug, Clone, Copy)]
pub struct RawReading {
    pub cpu_pct: f64,
    pub mem_used_pct: f64,
    pub mem_available_mb: f64,
    pub cpu_cores: u64,
}

/// Source of raw utilization readings.
pub trait ResourceProbe: Send {
    fn read(&mut self) -> Result<RawReading, MonitorError>;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// Reads `/proc/stat` and `/proc/meminfo`. CPU busy percentage is computed
/// from the delta against the previous reading; the first call takes a short
/// double reading to establish a baseline.
pub struct OsProbe {
    prev: Option<(u64, u64)>,
}

impl OsProbe {
    pub fn new() -> Self {
        OsProbe { prev: None }
    }

    fn read_cpu_counters() -> Result<(u64, u64), MonitorError> {
        let stat = std::fs::read_to_string("/proc/stat")
            .map_err(|e| MonitorError::ProbeUnavailable(format!("/proc/stat: {e}")))?;
        let line = stat
            .lines()
            .find(|l| l.starts_with("cpu "))
            .ok_or_else(|| MonitorError::ProbeUnavailable("no aggregate cpu line".into()))?;
        let fields: Vec<u64> =
            line.split_whitespace().skip(1).filter_map(|t| t.parse().ok()).collect();
        if fields.len() < 5 {
            return Err(MonitorError::ProbeUnavailable("short cpu line".into()));
        }
        let total: u64 = fields.iter().sum();
        // idle + iowait
        let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
        Ok((total, idle))
    }

    fn read_meminfo() -> Result<(f64, f64), MonitorError> {
        let text = std::fs::read_to_string("/proc/meminfo")
            .map_err(|e| MonitorError::ProbeUnavailable(format!("/proc/meminfo: {e}")))?;
        let mut total_kb = None;
        let mut avail_kb = None;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("MemTotal:") {
                total_kb = rest.split_whitespace().next().and_then(|v| v.parse::<f64>().ok());
            } else if let Some(rest) = line.strip_prefix("MemAvailable:") {
                avail_kb = rest.split_whitespace().next().and_then(|v| v.parse::<f64>().ok());
            }
        }
        match (total_kb, avail_kb) {
            (Some(t), Some(a)) if t > 0.0 => Ok((t, a)),
            _ => Err(MonitorError::ProbeUnavailable("meminfo missing fields".into())),
        }
    }
}

impl Default for OsProbe {
    fn default() -> Self {
        Self::new()
    }
}

impl ResourceProbe for OsProbe {
    fn read(&mut self) -> Result<RawReading, MonitorError> {
        let (total, idle) = match self.prev {
            Some(p) => p,
            None => {
                let first = Self::read_cpu_counters()?;
                std::thread::sleep(std::time::Duration::from_millis(50));
                first
            }
        };
        let (total2, idle2) = Self::read_cpu_counters()?;
        self.prev = Some((total2, idle2));
        let dt = total2.saturating_sub(total);
        let di = idle2.saturating_sub(idle);
        let cpu_pct = if dt == 0 { 0.0 } else { 100.0 * (dt - dt.min(di)) as f64 / dt as f64 };

        let (total_kb, avail_kb) = Self::read_meminfo()?;
        let mem_used_pct = 100.0 * (total_kb - avail_kb).max(0.0) / total_kb;
        let mem_available_mb = avail_kb / 1024.0;
        let cpu_cores =
            std::thread::available_parallelism().map(|n| n.get() as u64).unwrap_or(1);
        Ok(RawReading { cpu_pct, mem_used_pct, mem_available_mb, cpu_cores })
    }
}

/// Returns the same reading forever; for tests and demos.
pub struct FixedProbe(pub RawReading);

impl ResourceProbe for FixedProbe {
    fn read(&mut self) -> Result<RawReading, MonitorError> {
        Ok(self.0)
    }
}

/// Plays a sequence of readings, repeating the last one when exhausted.
pub struct ScriptedProbe {
    readings: Vec<RawReading>,
    cursor: usize,
}

impl ScriptedProbe {
    pub fn new(readings: Vec<RawReading>) -> Self {
        assert!(!readings.is_empty(), "scripted probe needs at least one reading");
        ScriptedProbe { readings, cursor: 0 }
    }
}

impl ResourceProbe for ScriptedProbe {
    fn read(&mut self) -> Result<RawReading, MonitorError> {
        let reading = self.readings[self.cursor.min(self.readings.len() - 1)];
        self.cursor += 1;
        Ok(reading)
    }
}

/// Take one clamped sample. Percentages outside [0, 100] are clamped with a
/// warning; negative available memory clamps to zero.
pub fn sample_now(
    probe: &mut dyn ResourceProbe,
    clock: &dyn Clock,
) -> Result<(ResourceSample, u64), MonitorError> {
    let raw = probe.read()?;
    let clamp_pct = |v: f64, what: &str| -> f64 {
        if !(0.0..=100.0).contains(&v) {
            log::warn!("{what} reading {v} outside [0, 100]; clamping");
            v.clamp(0.0, 100.0)
        } else {
            v
        }
    };
    let sample = ResourceSample {
        timestamp: clock.now(),
        cpu_pct: clamp_pct(raw.cpu_pct, "cpu_pct"),
        mem_used_pct: clamp_pct(raw.mem_used_pct, "mem_used_pct"),
        mem_available_mb: raw.mem_available_mb.max(0.0),
    };
    Ok((sample, raw.cpu_cores))
}

// ---------------------------------------------------------------------------
// Windowed summary
// ---------------------------------------------------------------------------

/// Averaging window in whole minutes; renders as `"1m"`, `"5m"`, …
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WindowKey(pub u32);

impl std::fmt::Display for WindowKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}m", self.0)
    }
}

impl Serialize for WindowKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WindowKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let digits = s
            .strip_suffix('m')
            .ok_or_else(|| D::Error::custom(format!("window key `{s}` missing `m` suffix")))?;
        digits
            .parse::<u32>()
            .map(WindowKey)
            .map_err(|e| D::Error::custom(format!("window key `{s}`: {e}")))
    }
}

/// The machine-readable utilization summary the scheduler gates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSummary {
    #[serde(with = "ts_serde")]
    pub timestamp: DateTime<Utc>,
    pub cpu_cores: u64,
    pub mem_available_mb: f64,
    pub cpu_avg_pct: BTreeMap<WindowKey, f64>,
    pub mem_avg_pct: BTreeMap<WindowKey, f64>,
    /// Windows that had no samples and fell back to the all-time mean.
    pub stale_windows: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Compute per-window means over samples with `timestamp >= now - window`.
/// A window that catches no samples falls back to the all-time mean and is
/// listed in `stale_windows`. `mem_available_mb` comes from the newest sample.
pub fn windowed_summary(
    samples: &[ResourceSample],
    now: DateTime<Utc>,
    windows_min: &[u32],
    cpu_cores: u64,
) -> Result<ResourceSummary, MonitorError> {
    if samples.is_empty() {
        return Err(MonitorError::EmptySeries);
    }
    let all_cpu = mean(samples.iter().map(|s| s.cpu_pct)).expect("non-empty");
    let all_mem = mean(samples.iter().map(|s| s.mem_used_pct)).expect("non-empty");
    let latest = samples.iter().max_by_key(|s| s.timestamp).expect("non-empty");

    let mut cpu_avg_pct = BTreeMap::new();
    let mut mem_avg_pct = BTreeMap::new();
    let mut stale_windows = Vec::new();
    for &w in windows_min {
        let cutoff = now - ChronoDuration::minutes(w as i64);
        let in_window: Vec<&ResourceSample> =
            samples.iter().filter(|s| s.timestamp >= cutoff).collect();
        let key = WindowKey(w);
        if in_window.is_empty() {
            cpu_avg_pct.insert(key, all_cpu);
            mem_avg_pct.insert(key, all_mem);
            stale_windows.push(key.to_string());
        } else {
            cpu_avg_pct.insert(key, mean(in_window.iter().map(|s| s.cpu_pct)).expect("non-empty"));
            mem_avg_pct
                .insert(key, mean(in_window.iter().map(|s| s.mem_used_pct)).expect("non-empty"));
        }
    }
    Ok(ResourceSummary {
        timestamp: now,
        cpu_cores,
        mem_available_mb: latest.mem_available_mb,
        cpu_avg_pct,
        mem_avg_pct,
        stale_windows,
    })
}

pub fn write_summary(path: &Path, summary: &ResourceSummary) -> Result<(), MonitorError> {
    fsutil::atomic_write_json(path, summary)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<ResourceSummary, MonitorError> {
    fsutil::read_json(path).map_err(|e| MonitorError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Per-run and cross-run statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceProperty {
    CpuPct,
    MemUsedPct,
}

impl std::fmt::Display for ResourceProperty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResourceProperty::CpuPct => f.write_str("cpu_pct"),
            ResourceProperty::MemUsedPct => f.write_str("mem_used_pct"),
        }
    }
}

/// Identifies one averaged series: which model, which step, which run,
/// which property.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub model: String,
    pub step: StepId,
    pub run_id: u64,
    pub property: ResourceProperty,
}

/// Mean of one series within one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub key: SeriesKey,
    pub sample_count: u64,
    pub mean: f64,
}

/// Average the sampled values for one run/series.
pub fn run_average(key: SeriesKey, values: &[f64]) -> Result<RunAggregate, MonitorError> {
    let mean = mean(values.iter().copied()).ok_or(MonitorError::EmptySeries)?;
    Ok(RunAggregate { key, sample_count: values.len() as u64, mean })
}

/// Cross-run utilization: the unweighted mean of per-run means. All
/// aggregates must share (model, step, property) but differ by run.
pub fn cross_run_utilization(aggregates: &[RunAggregate]) -> Result<f64, MonitorError> {
    if aggregates.is_empty() {
        return Err(MonitorError::EmptyRuns);
    }
    let first = &aggregates[0].key;
    for agg in aggregates {
        if agg.key.model != first.model
            || agg.key.step != first.step
            || agg.key.property != first.property
        {
            return Err(MonitorError::MixedKey);
        }
    }
    Ok(mean(aggregates.iter().map(|a| a.mean)).expect("non-empty"))
}

/// Step-tagged ledger line written on every tick while a step is active.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSampleRecord {
    pub model: String,
    pub run_id: u64,
    pub step: StepId,
    #[serde(with = "ts_serde")]
    pub timestamp: DateTime<Utc>,
    pub cpu_pct: f64,
    pub mem_used_pct: f64,
}

// ---------------------------------------------------------------------------
// Monitor
// ---------------------------------------------------------------------------

struct MonitorInner {
    probe: Box<dyn ResourceProbe>,
    ring: VecDeque<ResourceSample>,
    capacity: usize,
    cpu_cores: u64,
    active_step: Option<(u64, StepId)>,
}

/// Owns the probe, the sample ring, the summary file, and the step ledger.
/// Thread-safe so a background thread can tick while the pipeline annotates
/// step boundaries.
pub struct Monitor {
    inner: Mutex<MonitorInner>,
    summary_path: PathBuf,
    samples_path: PathBuf,
    model_id: String,
    windows_min: Vec<u32>,
}

impl Monitor {
    /// `capacity` is sized to hold the largest window at the sampling rate.
    pub fn new(
        probe: Box<dyn ResourceProbe>,
        summary_path: PathBuf,
        logs_root: &Path,
        model_id: &str,
        windows_min: &[u32],
        sampling_interval_s: u64,
    ) -> Self {
        let max_window_s = windows_min.iter().max().copied().unwrap_or(30) as u64 * 60;
        let capacity = (max_window_s / sampling_interval_s.max(1)).max(1) as usize + 1;
        Monitor {
            inner: Mutex::new(MonitorInner {
                probe,
                ring: VecDeque::with_capacity(capacity),
                capacity,
                cpu_cores: 0,
                active_step: None,
            }),
            summary_path,
            samples_path: logs_root.join(RESOURCE_SAMPLES_FILE),
            model_id: model_id.to_string(),
            windows_min: windows_min.to_vec(),
        }
    }

    /// Sample, refresh the summary file, and (while a step is active) append
    /// a step-tagged ledger line.
    pub fn tick(&self, clock: &dyn Clock) -> Result<ResourceSample, MonitorError> {
        let mut inner = self.inner.lock().expect("monitor state poisoned");
        let (sample, cores) = sample_now(inner.probe.as_mut(), clock)?;
        inner.cpu_cores = cores;
        if inner.ring.len() == inner.capacity {
            inner.ring.pop_front();
        }
        inner.ring.push_back(sample);

        let samples: Vec<ResourceSample> = inner.ring.iter().copied().collect();
        let summary = windowed_summary(&samples, sample.timestamp, &self.windows_min, cores)?;
        if let Some(parent) = self.summary_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_summary(&self.summary_path, &summary)?;

        if let Some((run_id, step)) = inner.active_step {
            let record = StepSampleRecord {
                model: self.model_id.clone(),
                run_id,
                step,
                timestamp: sample.timestamp,
                cpu_pct: sample.cpu_pct,
                mem_used_pct: sample.mem_used_pct,
            };
            let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            fsutil::append_line(&self.samples_path, &line)?;
        }
        Ok(sample)
    }

    pub fn begin_step(&self, run_id: u64, step: StepId) {
        self.inner.lock().expect("monitor state poisoned").active_step = Some((run_id, step));
    }

    pub fn end_step(&self) {
        self.inner.lock().expect("monitor state poisoned").active_step = None;
    }

    /// Summary over the current ring without touching the probe.
    pub fn latest_summary(&self, now: DateTime<Utc>) -> Result<ResourceSummary, MonitorError> {
        let inner = self.inner.lock().expect("monitor state poisoned");
        let samples: Vec<ResourceSample> = inner.ring.iter().copied().collect();
        windowed_summary(&samples, now, &self.windows_min, inner.cpu_cores)
    }

    pub fn summary_path(&self) -> &Path {
        &self.summary_path
    }
}

/// Runs `monitor.tick()` on an interval until stopped. The first tick happens
/// synchronously in `start` so a summary exists before the caller proceeds.
pub struct BackgroundMonitor {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundMonitor {
    pub fn start(
        monitor: Arc<Monitor>,
        clock: Arc<dyn Clock>,
        interval: std::time::Duration,
    ) -> Result<Self, MonitorError> {
        monitor.tick(clock.as_ref())?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let chunk = std::time::Duration::from_millis(50);
            loop {
                let mut waited = std::time::Duration::ZERO;
                while waited < interval {
                    if stop_flag.load(Ordering::Relaxed) {
                        return;
                    }
                    std::thread::sleep(chunk);
                    waited += chunk;
                }
                if stop_flag.load(Ordering::Relaxed) {
                    return;
                }
                if let Err(e) = monitor.tick(clock.as_ref()) {
                    log::warn!("background resource tick failed: {e}");
                }
            }
        });
        Ok(BackgroundMonitor { stop, handle: Some(handle) })
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for BackgroundMonitor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::TestClock;
    use chrono::TimeZone;

    fn ts(min: u32, sec: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 10, 28, 17, min, sec).unwrap()
    }

    fn sample(min: u32, sec: u32, cpu: f64, mem: f64) -> ResourceSample {
        ResourceSample {
            timestamp: ts(min, sec),
            cpu_pct: cpu,
            mem_used_pct: mem,
            mem_available_mb: 1843.2,
        }
    }

    #[test]
    fn windowed_means_are_per_window() {
        let samples = vec![
            sample(0, 0, 10.0, 30.0),
            sample(20, 0, 20.0, 40.0),
            sample(29, 30, 40.0, 50.0),
        ];
        let summary = windowed_summary(&samples, ts(30, 0), &[1, 5, 10, 30], 4).unwrap();
        assert_eq!(summary.cpu_avg_pct[&WindowKey(1)], 40.0);
        assert_eq!(summary.cpu_avg_pct[&WindowKey(10)], 30.0);
        assert!((summary.cpu_avg_pct[&WindowKey(30)] - 70.0 / 3.0).abs() < 1e-12);
        assert_eq!(summary.mem_avg_pct[&WindowKey(1)], 50.0);
        assert!(summary.stale_windows.is_empty());
        assert_eq!(summary.mem_available_mb, 1843.2);
    }

    #[test]
    fn empty_window_falls_back_and_flags_stale() {
        let samples = vec![sample(0, 0, 10.0, 30.0), sample(0, 5, 20.0, 40.0)];
        let summary = windowed_summary(&samples, ts(45, 0), &[1, 5], 2).unwrap();
        assert_eq!(summary.cpu_avg_pct[&WindowKey(1)], 15.0);
        assert_eq!(summary.cpu_avg_pct[&WindowKey(5)], 15.0);
        assert_eq!(summary.stale_windows, vec!["1m".to_string(), "5m".to_string()]);
    }

    #[test]
    fn empty_series_is_an_error() {
        assert!(matches!(
            windowed_summary(&[], ts(0, 0), &[1], 1),
            Err(MonitorError::EmptySeries)
        ));
    }

    #[test]
    fn summary_round_trips_with_window_keys() {
        let samples = vec![sample(0, 0, 12.5, 37.5)];
        let summary = windowed_summary(&samples, ts(0, 30), &[1, 5, 10, 30], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resource_usage_summary.json");
        write_summary(&path, &summary).unwrap();
        let loaded = read_summary(&path).unwrap();
        assert_eq!(summary, loaded);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"1m\""), "window keys serialize with the m suffix");
        let order = ["\"timestamp\"", "\"cpu_cores\"", "\"mem_available_mb\"",
                     "\"cpu_avg_pct\"", "\"mem_avg_pct\"", "\"stale_windows\""];
        let mut last = 0;
        for field in order {
            let pos = text.find(field).unwrap_or_else(|| panic!("{field} missing"));
            assert!(pos > last, "{field} out of order");
            last = pos;
        }
    }

    #[test]
    fn clamping_is_applied() {
        let mut probe = FixedProbe(RawReading {
            cpu_pct: 104.0,
            mem_used_pct: -3.0,
            mem_available_mb: -5.0,
            cpu_cores: 2,
        });
        let clock = TestClock::new(ts(0, 0), 100);
        let (s, cores) = sample_now(&mut probe, &clock).unwrap();
        assert_eq!(s.cpu_pct, 100.0);
        assert_eq!(s.mem_used_pct, 0.0);
        assert_eq!(s.mem_available_mb, 0.0);
        assert_eq!(cores, 2);
    }

    #[test]
    fn run_average_and_cross_run_mean_of_means() {
        let key = |run| SeriesKey {
            model: "m".into(),
            step: StepId::CodeGen,
            run_id: run,
            property: ResourceProperty::CpuPct,
        };
        let a = run_average(key(1), &[10.0, 20.0]).unwrap();
        let b = run_average(key(2), &[40.0]).unwrap();
        assert_eq!(a.mean, 15.0);
        assert_eq!(a.sample_count, 2);
        // Mean of per-run means, not of all pooled samples.
        let ru = cross_run_utilization(&[a.clone(), b]).unwrap();
        assert_eq!(ru, 27.5);
        assert!(matches!(cross_run_utilization(&[]), Err(MonitorError::EmptyRuns)));
        let mut other = a.clone();
        other.key.property = ResourceProperty::MemUsedPct;
        assert!(matches!(cross_run_utilization(&[a, other]), Err(MonitorError::MixedKey)));
    }

    #[test]
    fn run_average_rejects_empty() {
        let key = SeriesKey {
            model: "m".into(),
            step: StepId::TaskGen,
            run_id: 1,
            property: ResourceProperty::CpuPct,
        };
        assert!(matches!(run_average(key, &[]), Err(MonitorError::EmptySeries)));
    }

    #[test]
    fn monitor_tags_ticks_with_active_step() {
        let dir = tempfile::tempdir().unwrap();
        let summary_path = dir.path().join("summaries").join(SUMMARY_FILE);
        let monitor = Monitor::new(
            Box::new(FixedProbe(RawReading {
                cpu_pct: 12.5,
                mem_used_pct: 37.5,
                mem_available_mb: 1843.2,
                cpu_cores: 4,
            })),
            summary_path.clone(),
            dir.path(),
            "test-model",
            &[1, 5],
            5,
        );
        let clock = TestClock::new(ts(24, 12), 250);
        monitor.tick(&clock).unwrap();
        monitor.begin_step(7, StepId::Validate);
        monitor.tick(&clock).unwrap();
        monitor.tick(&clock).unwrap();
        monitor.end_step();
        monitor.tick(&clock).unwrap();

        let records: Vec<StepSampleRecord> =
            fsutil::read_jsonl(&dir.path().join(RESOURCE_SAMPLES_FILE)).unwrap();
        assert_eq!(records.len(), 2, "only ticks inside a step are tagged");
        assert!(records.iter().all(|r| r.run_id == 7 && r.step == StepId::Validate));
        assert!(summary_path.is_file());
        let summary = read_summary(&summary_path).unwrap();
        assert_eq!(summary.cpu_cores, 4);
        assert_eq!(summary.cpu_avg_pct[&WindowKey(1)], 12.5);
    }

    #[test]
    fn ring_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let monitor = Monitor::new(
            Box::new(FixedProbe(RawReading {
                cpu_pct: 1.0,
                mem_used_pct: 1.0,
                mem_available_mb: 100.0,
                cpu_cores: 1,
            })),
            dir.path().join(SUMMARY_FILE),
            dir.path(),
            "m",
            &[1],
            30, // capacity = 60/30 + 1 = 3
        );
        let clock = TestClock::new(ts(0, 0), 100);
        for _ in 0..10 {
            monitor.tick(&clock).unwrap();
        }
        let inner = monitor.inner.lock().unwrap();
        assert_eq!(inner.ring.len(), 3);
    }

    #[test]
    fn os_probe_reads_something_plausible() {
        let mut probe = OsProbe::new();
        let reading = probe.read().unwrap();
        assert!(reading.cpu_pct >= 0.0 && reading.cpu_pct <= 100.0);
        assert!(reading.mem_used_pct > 0.0 && reading.mem_used_pct < 100.0);
        assert!(reading.mem_available_mb > 0.0);
        assert!(reading.cpu_cores >= 1);
    }

    #[test]
    fn background_monitor_writes_summary_before_returning() {
        let dir = tempfile::tempdir().unwrap();
        let summary_path = dir.path().join(SUMMARY_FILE);
        let monitor = Arc::new(Monitor::new(
            Box::new(FixedProbe(RawReading {
                cpu_pct: 5.0,
                mem_used_pct: 20.0,
                mem_available_mb: 512.0,
                cpu_cores: 2,
            })),
            summary_path.clone(),
            dir.path(),
            "m",
            &[1],
            5,
        ));
        let clock: Arc<dyn Clock> = Arc::new(TestClock::new(ts(0, 0), 100));
        let bg = BackgroundMonitor::start(monitor, clock, std::time::Duration::from_secs(60))
            .unwrap();
        assert!(summary_path.is_file(), "first tick is synchronous");
        bg.stop();
    }
}
