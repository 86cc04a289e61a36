//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Mutex;

use ips::domain::{AdmissionEnvelope, Timestamp};
use ips::engine::Scorer;
use ips::features::VariableSchema;
use ips::ingest::{JoinState, SourceBatch};
use ips::models::{ModelSet, ThresholdTable};
use ips::synthbench::{CohortSpec, PatientGenerator};

/// Timing-sensitive tests take this so they never share the CPU.
pub static SERIAL: Mutex<()> = Mutex::new(());

pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn demo_scorer() -> Scorer {
    let schema = VariableSchema::demo();
    let models = ModelSet::demo(&schema).unwrap();
    Scorer::new(schema, models, ThresholdTable::published()).unwrap()
}

/// Joined synthetic envelopes; `produced_at` steps one second per envelope
/// from `start`.
pub fn envelopes(n: usize, seed: u64, start: Timestamp) -> Vec<AdmissionEnvelope> {
    let spec = CohortSpec { n_patients: n, seed, ..CohortSpec::default() };
    let mut generator = PatientGenerator::new(spec).unwrap();
    let mut batch = SourceBatch::new(1);
    for _ in 0..n {
        for record in generator.next_patient().records {
            batch.push(record);
        }
    }
    let mut envelopes = JoinState::new(0).apply(batch).envelopes;
    envelopes.sort_by(|a, b| a.key.cmp(&b.key));
    for (i, env) in envelopes.iter_mut().enumerate() {
        env.produced_at = start.plus_millis(i as i64 * 1_000);
    }
    envelopes
}

pub fn write_file(path: &Path, contents: &str) {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    std::fs::write(path, contents).unwrap();
}
