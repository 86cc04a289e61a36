//! Shared vocabulary for every pipeline stage.
//!
//! Everything here is plain data: construction-time validation only, no I/O.
//! Timestamps travel as ISO-8601 UTC strings and live in memory as epoch
//! milliseconds.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::atomic::{AtomicI64, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// UTC instant with millisecond resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    pub fn to_iso(self) -> String {
        match Utc.timestamp_millis_opt(self.0).single() {
            Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
            None => format!("invalid({})", self.0),
        }
    }

    /// Accepts RFC 3339 (any offset, normalized to UTC) or a bare
    /// `YYYY-MM-DDTHH:MM:SS` / `YYYY-MM-DD HH:MM:SS` taken as UTC.
    pub fn parse_iso(s: &str) -> Result<Self, TimestampError> {
        let s = s.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(Timestamp(dt.with_timezone(&Utc).timestamp_millis()));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
            if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(Timestamp(naive.and_utc().timestamp_millis()));
            }
        }
        Err(TimestampError(s.to_string()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse_iso(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed timestamp {0:?}")]
pub struct TimestampError(pub String);

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse_iso(&s).map_err(serde::de::Error::custom)
    }
}

/// Source of "now" for every stage, so tests and benchmarks can control time.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0);
        Timestamp(ms)
    }
}

/// Wall-clock anchored once, then advanced by a monotonic `Instant`.
/// Immune to wall-clock steps while a benchmark runs.
#[derive(Debug, Clone)]
pub struct MonotonicClock {
    anchor_wall: Timestamp,
    anchor: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { anchor_wall: SystemClock.now(), anchor: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Timestamp {
        self.anchor_wall.plus_millis(self.anchor.elapsed().as_millis() as i64)
    }
}

/// Hand-driven clock for tests.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicI64>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock(Arc::new(AtomicI64::new(start.0)))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t.0, AtomicOrdering::SeqCst);
    }

    pub fn advance_millis(&self, ms: i64) {
        self.0.fetch_add(ms, AtomicOrdering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(AtomicOrdering::SeqCst))
    }
}

/// Identity of one hospital admission.
///
/// Equality, ordering and hashing use only the two id strings, compared
/// byte-exact. `admitted_at` rides along but is not part of identity:
/// provider/lab/medication rows do not carry it and hold [`Timestamp::EPOCH`]
/// until joined.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmissionKey {
    pub patient_id: String,
    pub admission_id: String,
    pub admitted_at: Timestamp,
}

impl AdmissionKey {
    pub fn new(patient_id: impl Into<String>, admission_id: impl Into<String>, admitted_at: Timestamp) -> Self {
        AdmissionKey { patient_id: patient_id.into(), admission_id: admission_id.into(), admitted_at }
    }

    /// Bytes used for partitioning and store keys. The separator (0x1f) cannot
    /// occur in CSV-sourced ids without quoting, so distinct pairs never collide.
    pub fn key_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.patient_id.len() + self.admission_id.len() + 1);
        out.extend_from_slice(self.patient_id.as_bytes());
        out.push(0x1f);
        out.extend_from_slice(self.admission_id.as_bytes());
        out
    }

    pub fn from_key_bytes(bytes: &[u8]) -> Option<(String, String)> {
        let pos = bytes.iter().position(|b| *b == 0x1f)?;
        let pid = std::str::from_utf8(&bytes[..pos]).ok()?;
        let aid = std::str::from_utf8(&bytes[pos + 1..]).ok()?;
        Some((pid.to_string(), aid.to_string()))
    }

    fn ids(&self) -> (&str, &str) {
        (&self.patient_id, &self.admission_id)
    }
}

impl PartialEq for AdmissionKey {
    fn eq(&self, other: &Self) -> bool {
        self.ids() == other.ids()
    }
}

impl Eq for AdmissionKey {}

impl Hash for AdmissionKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.ids().hash(state);
    }
}

impl PartialOrd for AdmissionKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AdmissionKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ids().cmp(&other.ids())
    }
}

impl fmt::Display for AdmissionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.patient_id, self.admission_id)
    }
}

/// A payload cell: string, number or null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Null,
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Number(v) => Some(*v),
            Scalar::Text(s) => s.trim().parse().ok(),
            Scalar::Null => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Scalar::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Scalar::Null)
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Text(s.to_string())
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Number(v)
    }
}

pub type Payload = BTreeMap<String, Scalar>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Admission,
    Provider,
    Lab,
    Medication,
}

impl SourceKind {
    pub const ALL: [SourceKind; 4] =
        [SourceKind::Admission, SourceKind::Provider, SourceKind::Lab, SourceKind::Medication];

    /// File-name prefix, e.g. `labs_2024-01.csv`.
    pub fn file_prefix(self) -> &'static str {
        match self {
            SourceKind::Admission => "admissions",
            SourceKind::Provider => "providers",
            SourceKind::Lab => "labs",
            SourceKind::Medication => "medications",
        }
    }

    pub fn from_file_prefix(prefix: &str) -> Option<Self> {
        SourceKind::ALL.into_iter().find(|k| k.file_prefix() == prefix)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub kind: SourceKind,
    pub key: AdmissionKey,
    pub payload: Payload,
    pub observed_at: Timestamp,
}

/// One admission joined with its provider, lab and medication rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionEnvelope {
    pub key: AdmissionKey,
    pub admission: Payload,
    pub providers: Vec<Payload>,
    pub labs: Vec<Payload>,
    pub medications: Vec<Payload>,
    pub produced_at: Timestamp,
}

impl AdmissionEnvelope {
    pub fn record_count(&self) -> usize {
        1 + self.providers.len() + self.labs.len() + self.medications.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ProvidersEmpty,
    PatientIdEmpty,
    AdmissionIdEmpty,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::ProvidersEmpty => "providers empty",
            Violation::PatientIdEmpty => "patient_id empty",
            Violation::AdmissionIdEmpty => "admission_id empty",
        })
    }
}

/// Empty result means the envelope is legal.
pub fn validate_envelope(env: &AdmissionEnvelope) -> Vec<Violation> {
    let mut out = Vec::new();
    if env.key.patient_id.is_empty() {
        out.push(Violation::PatientIdEmpty);
    }
    if env.key.admission_id.is_empty() {
        out.push(Violation::AdmissionIdEmpty);
    }
    if env.providers.is_empty() {
        out.push(Violation::ProvidersEmpty);
    }
    out
}

/// The eight modeled postoperative complications, in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ComplicationCode {
    AKI,
    ICU,
    MV,
    WND,
    CV,
    NEU,
    SEP,
    VTE,
}

impl ComplicationCode {
    pub const ALL: [ComplicationCode; 8] = [
        ComplicationCode::AKI,
        ComplicationCode::ICU,
        ComplicationCode::MV,
        ComplicationCode::WND,
        ComplicationCode::CV,
        ComplicationCode::NEU,
        ComplicationCode::SEP,
        ComplicationCode::VTE,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComplicationCode::AKI => "AKI",
            ComplicationCode::ICU => "ICU",
            ComplicationCode::MV => "MV",
            ComplicationCode::WND => "WND",
            ComplicationCode::CV => "CV",
            ComplicationCode::NEU => "NEU",
            ComplicationCode::SEP => "SEP",
            ComplicationCode::VTE => "VTE",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ComplicationCode::AKI => "Acute kidney injury",
            ComplicationCode::ICU => "Intensive care unit admission > 48 hours",
            ComplicationCode::MV => "Mechanical ventilation > 48 hours",
            ComplicationCode::WND => "Wound complications",
            ComplicationCode::CV => "Cardiovascular complications",
            ComplicationCode::NEU => "Neurologic complications",
            ComplicationCode::SEP => "Sepsis",
            ComplicationCode::VTE => "Venous thromboembolism",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComplicationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown complication code {0:?}")]
pub struct UnknownComplication(pub String);

impl FromStr for ComplicationCode {
    type Err = UnknownComplication;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComplicationCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownComplication(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RiskClass {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub feature: String,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub key: AdmissionKey,
    pub scores: BTreeMap<ComplicationCode, f64>,
    pub classes: BTreeMap<ComplicationCode, RiskClass>,
    pub contributors: BTreeMap<ComplicationCode, Vec<Contributor>>,
    pub scored_at: Timestamp,
    pub model_version: String,
}

impl RiskProfile {
    pub fn high_risk_count(&self) -> usize {
        self.classes.values().filter(|c| **c == RiskClass::High).count()
    }

    /// Structural invariants that do not need a threshold table.
    pub fn structural_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for code in ComplicationCode::ALL {
            match self.scores.get(&code) {
                None => out.push(format!("{code} score missing")),
                Some(p) if !(0.0..=1.0).contains(p) => out.push(format!("{code} score {p} out of [0,1]")),
                _ => {}
            }
            if !self.classes.contains_key(&code) {
                out.push(format!("{code} class missing"));
            }
            match self.contributors.get(&code) {
                None => out.push(format!("{code} contributors missing")),
                Some(list) => {
                    if list.windows(2).any(|w| w[0].contribution.abs() < w[1].contribution.abs()) {
                        out.push(format!("{code} contributors not sorted by |contribution|"));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub key: AdmissionKey,
    pub author: String,
    pub adjusted: BTreeMap<ComplicationCode, f64>,
    #[serde(default)]
    pub note: String,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeedbackError {
    #[error("no adjustments")]
    NoAdjustments,
    #[error("{0} out of [0,1]")]
    OutOfRange(ComplicationCode),
}

impl Feedback {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if self.adjusted.is_empty() {
            return Err(FeedbackError::NoAdjustments);
        }
        for (code, value) in &self.adjusted {
            if !value.is_finite() || !(0.0..=1.0).contains(value) {
                return Err(FeedbackError::OutOfRange(*code));
            }
        }
        Ok(())
    }
}
