//! The data producer: scan source directories, join rows by admission,
//! publish canonical JSON envelopes onto the bus.
//!
//! Source files are CSV with a header row, named `<kind>_<anything>.csv`
//! where kind is one of `admissions`, `providers`, `labs`, `medications`.
//! A file is read at most once per deployment (seen-file ledger).

mod join;
mod publish;
mod scan;

pub use join::{join_admissions, JoinOutcome, JoinReport, JoinState, RecordLedger, DEFAULT_GRACE_INTERVALS};
pub use publish::{publish_batch, DeliveryFailure, RetryPolicy};
pub use scan::{
    parse_csv, scan_sources, ColumnType, SeenFileLedger, SourceBatch, SourceConfig, Scanner, ADMISSION_COLUMNS,
    LAB_COLUMNS, MEDICATION_COLUMNS, PROVIDER_COLUMNS,
};

use crate::canonical::to_canonical_vec;
use crate::domain::AdmissionEnvelope;

/// Default time between directory scans.
pub const DEFAULT_INTERVAL_SECS: u64 = 10;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("source directory {dir} unreadable: {source}")]
    Config { dir: String, source: std::io::Error },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("ledger error: {0}")]
    Ledger(String),
}

/// Canonical JSON: sorted keys, no insignificant whitespace, nulls kept.
pub fn serialize_envelope(env: &AdmissionEnvelope) -> Vec<u8> {
    to_canonical_vec(env).expect("envelopes always serialize")
}

pub fn deserialize_envelope(bytes: &[u8]) -> serde_json::Result<AdmissionEnvelope> {
    serde_json::from_slice(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AdmissionKey, Payload, Scalar, Timestamp};

    fn envelope() -> AdmissionEnvelope {
        let mut provider = Payload::new();
        provider.insert("provider_role".into(), "surgeon".into());
        provider.insert("provider_id".into(), "D7".into());
        let mut lab = Payload::new();
        lab.insert("lab_name".into(), "creatinine".into());
        lab.insert("lab_value".into(), Scalar::Number(1.25));
        lab.insert("lab_units".into(), Scalar::Null);
        AdmissionEnvelope {
            key: AdmissionKey::new("P1", "A1", Timestamp(1_000)),
            admission: Payload::new(),
            providers: vec![provider],
            labs: vec![lab],
            medications: vec![],
            produced_at: Timestamp(2_000),
        }
    }

    #[test]
    fn canonical_json_shape() {
        let json: serde_json::Value = serde_json::from_slice(&serialize_envelope(&envelope())).unwrap();
        assert_eq!(json["providers"].as_array().unwrap().len(), 1);
        assert!(json["labs"][0]["lab_units"].is_null());
        let text = String::from_utf8(serialize_envelope(&envelope())).unwrap();
        assert!(!text.contains(' '));
        assert!(text.contains(r#""lab_units":null"#));
        assert!(text.find("\"admission\"").unwrap() < text.find("\"key\"").unwrap());
    }

    #[test]
    fn equal_values_identical_bytes() {
        let a = envelope();
        let mut b = envelope();
        // rebuild the provider map in a different insertion order
        let mut p = Payload::new();
        p.insert("provider_id".into(), "D7".into());
        p.insert("provider_role".into(), "surgeon".into());
        b.providers = vec![p];
        assert_eq!(serialize_envelope(&a), serialize_envelope(&b));
        assert_eq!(deserialize_envelope(&serialize_envelope(&a)).unwrap(), a);
    }
}
