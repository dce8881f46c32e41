//! Wall-clock abstraction so every persisted timestamp and duration can be
//! pinned in tests. All components take time from a [`Clock`]; the system
//! clock truncates to millisecond precision so formatted timestamps
//! round-trip exactly through the artifact files.

use chrono::{DateTime, Duration, SecondsFormat, Timelike, Utc};
use std::sync::Mutex;

/// Source of "now" for the whole pipeline.
pub trait Clock: Send + Sync {
    /// Current UTC time at millisecond precision.
    fn now(&self) -> DateTime<Utc>;
}

/// Real wall clock.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        truncate_to_ms(Utc::now())
    }
}

/// Deterministic clock for tests: starts at a fixed instant and advances by a
/// fixed tick on every `now()` call, so identical call sequences replay with
/// identical timestamps.
#[derive(Debug)]
pub struct TestClock {
    current: Mutex<DateTime<Utc>>,
    tick: Duration,
}

impl TestClock {
    pub fn new(start: DateTime<Utc>, tick_ms: i64) -> Self {
        Self {
            current: Mutex::new(truncate_to_ms(start)),
            tick: Duration::milliseconds(tick_ms.max(0)),
        }
    }
}

impl Clock for TestClock {
    fn now(&self) -> DateTime<Utc> {
        let mut cur = self.current.lock().expect("test clock poisoned");
        let out = *cur;
        *cur = out + self.tick;
        out
    }
}

/// Drop sub-millisecond precision so formatting at `%.3f` loses nothing.
pub fn truncate_to_ms(ts: DateTime<Utc>) -> DateTime<Utc> {
    let nanos = ts.nanosecond();
    ts.with_nanosecond(nanos - nanos % 1_000_000).unwrap_or(ts)
}

/// Canonical timestamp format used in every artifact: RFC 3339, UTC,
/// millisecond precision, `Z` suffix.
pub fn format_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Parse a timestamp written by [`format_ts`]. Any RFC 3339 offset is
/// accepted; the result is normalized to UTC.
pub fn parse_ts(s: &str) -> Result<DateTime<Utc>, chrono::ParseError> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc))
}

/// Lenient parser for timestamps found in third-party CSV rows. Accepts
/// RFC 3339 plus the common space-separated variants, with or without an
/// explicit offset (naive times are taken as UTC).
pub fn parse_ts_lenient(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = parse_ts(s) {
        return Some(t);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%dT%H:%M:%S%.f%:z"] {
        if let Ok(t) = DateTime::parse_from_str(s, fmt) {
            return Some(t.with_timezone(&Utc));
        }
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

/// Seconds between two instants as a float with millisecond resolution.
pub fn seconds_between(start: DateTime<Utc>, end: DateTime<Utc>) -> f64 {
    (end - start).num_milliseconds() as f64 / 1000.0
}

/// Serde helpers for `DateTime<Utc>` fields in artifact schemas.
pub mod ts_serde {
    use super::{format_ts, parse_ts};
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&format_ts(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(de)?;
        parse_ts(&raw).map_err(serde::de::Error::custom)
    }
}
