use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;

/// Upper bounds (ms) of the exported latency buckets; the last bucket is open.
pub const LATENCY_BUCKETS_MS: [u64; 12] = [10, 50, 100, 250, 500, 1_000, 2_000, 5_000, 10_000, 30_000, 60_000, 120_000];

/// Raw latency samples in milliseconds.
#[derive(Debug, Default)]
pub struct LatencyRecorder {
    samples: Mutex<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub count: u64,
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub max: u64,
}

impl LatencyRecorder {
    pub fn record(&self, ms: u64) {
        self.samples.lock().expect("latency lock").push(ms);
    }

    pub fn samples(&self) -> Vec<u64> {
        self.samples.lock().expect("latency lock").clone()
    }

    pub fn clear(&self) {
        self.samples.lock().expect("latency lock").clear();
    }

    pub fn percentiles(&self) -> Percentiles {
        percentiles(&self.samples())
    }

    /// `(upper bound, count)` pairs; `None` marks the open last bucket.
    pub fn histogram(&self) -> Vec<(Option<u64>, u64)> {
        let samples = self.samples.lock().expect("latency lock");
        let mut counts = vec![0u64; LATENCY_BUCKETS_MS.len() + 1];
        for s in samples.iter() {
            let i = LATENCY_BUCKETS_MS.partition_point(|b| b < s);
            counts[i] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (LATENCY_BUCKETS_MS.get(i).copied(), c))
            .collect()
    }
}

/// Nearest-rank percentiles.
pub fn percentiles(samples: &[u64]) -> Percentiles {
    if samples.is_empty() {
        return Percentiles::default();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = |q: f64| {
        let r = (q * sorted.len() as f64).ceil() as usize;
        sorted[r.clamp(1, sorted.len()) - 1]
    };
    Percentiles {
        count: sorted.len() as u64,
        mean: sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
        p50: rank(0.50),
        p95: rank(0.95),
        p99: rank(0.99),
        max: *sorted.last().expect("non-empty"),
    }
}

/// Pipeline counters shared by producer, engine and API.
#[derive(Debug, Default)]
pub struct Metrics {
    pub records_parsed: AtomicU64,
    pub malformed_rows: AtomicU64,
    pub envelopes_published: AtomicU64,
    pub orphans: AtomicU64,
    pub ingest_rejected: AtomicU64,
    pub delivery_failures: AtomicU64,
    pub records_in: AtomicU64,
    pub records_scored: AtomicU64,
    pub records_rejected: AtomicU64,
    pub bus_gaps: AtomicU64,
    pub worker_restarts: AtomicU64,
    pub bus_errors: AtomicU64,
    warnings: Mutex<BTreeMap<String, u64>>,
    /// Envelope `produced_at` to profile stored.
    pub end_to_end: LatencyRecorder,
    /// Poll to profile stored.
    pub processing: LatencyRecorder,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBucket {
    pub le_ms: Option<u64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub records_parsed: u64,
    pub malformed_rows: u64,
    pub envelopes_published: u64,
    pub orphans: u64,
    pub ingest_rejected: u64,
    pub delivery_failures: u64,
    pub records_in: u64,
    pub records_scored: u64,
    pub records_rejected: u64,
    pub bus_gaps: u64,
    pub worker_restarts: u64,
    pub bus_errors: u64,
    pub warnings: BTreeMap<String, u64>,
    pub latency_ms: Percentiles,
    pub latency_histogram: Vec<HistogramBucket>,
    pub processing_ms: Percentiles,
}

impl Metrics {
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }

    pub fn add_warnings(&self, counts: BTreeMap<String, u64>) {
        if counts.is_empty() {
            return;
        }
        let mut w = self.warnings.lock().expect("warnings lock");
        for (k, v) in counts {
            *w.entry(k).or_default() += v;
        }
    }

    pub fn warnings(&self) -> BTreeMap<String, u64> {
        self.warnings.lock().expect("warnings lock").clone()
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let g = Self::get;
        MetricsSnapshot {
            records_parsed: g(&self.records_parsed),
            malformed_rows: g(&self.malformed_rows),
            envelopes_published: g(&self.envelopes_published),
            orphans: g(&self.orphans),
            ingest_rejected: g(&self.ingest_rejected),
            delivery_failures: g(&self.delivery_failures),
            records_in: g(&self.records_in),
            records_scored: g(&self.records_scored),
            records_rejected: g(&self.records_rejected),
            bus_gaps: g(&self.bus_gaps),
            worker_restarts: g(&self.worker_restarts),
            bus_errors: g(&self.bus_errors),
            warnings: self.warnings(),
            latency_ms: self.end_to_end.percentiles(),
            latency_histogram: self
                .end_to_end
                .histogram()
                .into_iter()
                .map(|(le_ms, count)| HistogramBucket { le_ms, count })
                .collect(),
            processing_ms: self.processing.percentiles(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let p = percentiles(&(1..=100).collect::<Vec<_>>());
        assert_eq!((p.p50, p.p95, p.p99, p.max), (50, 95, 99, 100));
        assert_eq!(percentiles(&[7]).p99, 7);
        assert_eq!(percentiles(&[]).count, 0);
    }

    #[test]
    fn histogram_buckets() {
        let r = LatencyRecorder::default();
        for ms in [5, 10, 11, 1_000_000] {
            r.record(ms);
        }
        let h = r.histogram();
        assert_eq!(h[0], (Some(10), 2));
        assert_eq!(h[1], (Some(50), 1));
        assert_eq!(*h.last().unwrap(), (None, 1));
    }
}
