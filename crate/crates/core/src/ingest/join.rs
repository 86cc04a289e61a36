use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::SourceBatch;
use crate::canonical::to_canonical_vec;
use crate::domain::{validate_envelope, AdmissionEnvelope, AdmissionKey, Payload, SourceKind, SourceRecord, Timestamp};

pub const DEFAULT_GRACE_INTERVALS: u64 = 3;

/// Cumulative record accounting across every interval joined so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecordLedger {
    pub parsed: u64,
    pub enveloped: u64,
    pub buffered: u64,
    pub rejected: u64,
}

impl RecordLedger {
    pub fn balanced(&self) -> bool {
        self.parsed == self.enveloped + self.buffered + self.rejected
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct JoinReport {
    pub interval_id: u64,
    pub envelopes_emitted: usize,
    pub envelopes_updated: usize,
    /// Records seen this interval whose admission record was absent.
    pub orphans: BTreeMap<SourceKind, usize>,
    /// Admissions dropped, each with its attached records.
    pub rejected: usize,
    pub rejections: Vec<(AdmissionKey, String)>,
    pub duplicates: usize,
    pub orphans_expired: usize,
    pub pending_admissions: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JoinOutcome {
    pub envelopes: Vec<AdmissionEnvelope>,
    pub report: JoinReport,
}

#[derive(Clone, Debug, PartialEq)]
struct Pending {
    admission: SourceRecord,
    children: Vec<SourceRecord>,
    first_interval: u64,
}

#[derive(Clone, Debug, PartialEq)]
struct Emitted {
    admission: SourceRecord,
    children: Vec<SourceRecord>,
}

/// Join state carried between intervals: admissions waiting for a provider,
/// records waiting for their admission, and admissions already emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct JoinState {
    grace_intervals: u64,
    pending: BTreeMap<AdmissionKey, Pending>,
    orphans: BTreeMap<AdmissionKey, Vec<(SourceRecord, u64)>>,
    emitted: BTreeMap<AdmissionKey, Emitted>,
    parsed: u64,
    rejected: u64,
}

impl Default for JoinState {
    fn default() -> Self {
        Self::new(DEFAULT_GRACE_INTERVALS)
    }
}

fn record_bytes(r: &SourceRecord) -> Vec<u8> {
    #[derive(Serialize)]
    struct View<'a> {
        key: (&'a str, &'a str, Timestamp),
        payload: &'a Payload,
        observed_at: Timestamp,
    }
    to_canonical_vec(&View {
        key: (&r.key.patient_id, &r.key.admission_id, r.key.admitted_at),
        payload: &r.payload,
        observed_at: r.observed_at,
    })
    .expect("records serialize")
}

fn payload_bytes(p: &Payload) -> Vec<u8> {
    to_canonical_vec(p).expect("payloads serialize")
}

fn build_envelope(admission: &SourceRecord, children: &[SourceRecord]) -> AdmissionEnvelope {
    let mut lists: BTreeMap<SourceKind, Vec<(Vec<u8>, Payload)>> = BTreeMap::new();
    for c in children {
        lists.entry(c.kind).or_default().push((payload_bytes(&c.payload), c.payload.clone()));
    }
    let mut take = |kind| {
        let mut v = lists.remove(&kind).unwrap_or_default();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.into_iter().map(|(_, p)| p).collect::<Vec<_>>()
    };
    let produced_at = children.iter().map(|c| c.observed_at).fold(admission.observed_at, Timestamp::max);
    AdmissionEnvelope {
        key: admission.key.clone(),
        admission: admission.payload.clone(),
        providers: take(SourceKind::Provider),
        labs: take(SourceKind::Lab),
        medications: take(SourceKind::Medication),
        produced_at,
    }
}

impl JoinState {
    pub fn new(grace_intervals: u64) -> Self {
        JoinState {
            grace_intervals,
            pending: BTreeMap::new(),
            orphans: BTreeMap::new(),
            emitted: BTreeMap::new(),
            parsed: 0,
            rejected: 0,
        }
    }

    pub fn grace_intervals(&self) -> u64 {
        self.grace_intervals
    }

    pub fn pending_keys(&self) -> impl Iterator<Item = &AdmissionKey> {
        self.pending.keys()
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.values().map(Vec::len).sum()
    }

    pub fn ledger(&self) -> RecordLedger {
        let enveloped = self.emitted.values().map(|e| 1 + e.children.len() as u64).sum();
        let buffered = self.pending.values().map(|p| 1 + p.children.len() as u64).sum::<u64>()
            + self.orphan_count() as u64;
        RecordLedger { parsed: self.parsed, enveloped, buffered, rejected: self.rejected }
    }

    /// Joins one interval's batch. Runs expiry even when the batch is empty.
    pub fn apply(&mut self, batch: SourceBatch) -> JoinOutcome {
        let interval = batch.interval_id;
        let mut report = JoinReport { interval_id: interval, ..Default::default() };
        self.parsed += batch.total() as u64;
        let mut records = batch.records;

        // Admissions: one per key. Within a batch the canonical minimum wins,
        // across batches the first seen wins.
        let mut by_key: BTreeMap<AdmissionKey, Vec<SourceRecord>> = BTreeMap::new();
        for r in records.remove(&SourceKind::Admission).unwrap_or_default() {
            by_key.entry(r.key.clone()).or_default().push(r);
        }
        for (key, mut group) in by_key {
            group.sort_by_cached_key(record_bytes);
            let mut group = group.into_iter();
            let first = group.next().expect("non-empty group");
            let extra = group.len();
            report.duplicates += extra;
            self.rejected += extra as u64;
            if self.pending.contains_key(&key) || self.emitted.contains_key(&key) {
                report.duplicates += 1;
                self.rejected += 1;
                continue;
            }
            let children = self.orphans.remove(&key).unwrap_or_default().into_iter().map(|(r, _)| r).collect();
            self.pending.insert(key, Pending { admission: first, children, first_interval: interval });
        }

        let mut updated = BTreeSet::new();
        for (kind, list) in records {
            debug_assert_ne!(kind, SourceKind::Admission);
            for r in list {
                if let Some(e) = self.emitted.get_mut(&r.key) {
                    updated.insert(r.key.clone());
                    e.children.push(r);
                } else if let Some(p) = self.pending.get_mut(&r.key) {
                    p.children.push(r);
                } else {
                    *report.orphans.entry(kind).or_default() += 1;
                    self.orphans.entry(r.key.clone()).or_default().push((r, interval));
                }
            }
        }

        let mut envelopes = Vec::new();
        for key in &updated {
            let e = &self.emitted[key];
            envelopes.push(build_envelope(&e.admission, &e.children));
            report.envelopes_updated += 1;
        }

        let ready: Vec<AdmissionKey> = self
            .pending
            .iter()
            .filter(|(_, p)| p.children.iter().any(|c| c.kind == SourceKind::Provider))
            .map(|(k, _)| k.clone())
            .collect();
        for key in ready {
            let p = self.pending.remove(&key).expect("ready key is pending");
            let env = build_envelope(&p.admission, &p.children);
            let violations = validate_envelope(&env);
            if violations.is_empty() {
                self.emitted.insert(key, Emitted { admission: p.admission, children: p.children });
                envelopes.push(env);
                report.envelopes_emitted += 1;
            } else {
                let reason = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
                self.reject(&mut report, key, 1 + p.children.len(), reason);
            }
        }

        let grace = self.grace_intervals;
        let expired: Vec<AdmissionKey> = self
            .pending
            .iter()
            .filter(|(_, p)| interval.saturating_sub(p.first_interval) >= grace)
            .map(|(k, _)| k.clone())
            .collect();
        for key in expired {
            let p = self.pending.remove(&key).expect("expired key is pending");
            self.reject(&mut report, key, 1 + p.children.len(), "no provider".to_string());
        }
        self.orphans.retain(|_, list| {
            let before = list.len();
            list.retain(|(_, first)| interval.saturating_sub(*first) < grace);
            report.orphans_expired += before - list.len();
            !list.is_empty()
        });
        self.rejected += report.orphans_expired as u64;

        envelopes.sort_by(|a, b| a.key.cmp(&b.key));
        report.pending_admissions = self.pending.len();
        JoinOutcome { envelopes, report }
    }

    fn reject(&mut self, report: &mut JoinReport, key: AdmissionKey, records: usize, reason: String) {
        self.rejected += records as u64;
        report.rejected += 1;
        report.rejections.push((key, reason));
    }
}

/// Pure form of [`JoinState::apply`].
pub fn join_admissions(batch: SourceBatch, mut state: JoinState) -> (Vec<AdmissionEnvelope>, JoinReport, JoinState) {
    let JoinOutcome { envelopes, report } = state.apply(batch);
    (envelopes, report, state)
}
