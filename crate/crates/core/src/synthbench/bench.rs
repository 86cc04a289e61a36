//! Load generator and report for a running pipeline.
//!
//! Envelopes are offered at a fixed rate by a token-bucket thread. Latency is
//! envelope `produced_at` to profile stored, both read from the pipeline's
//! monotonic clock. Throughput counts completed envelopes over the nominal
//! offering window; the generator's own pace and the drain time after the
//! last offer are reported next to it, so a pipeline that falls behind shows
//! up as a long drain rather than a lower rate.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::cohort::{CohortSpec, PatientGenerator};
use super::pipeline::{PipelineConfig, PipelineHandle};
use super::SynthError;
use crate::engine::{Metrics, Percentiles};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Envelopes offered per minute.
    pub rate_per_min: f64,
    pub duration_secs: f64,
    /// Producer flush and engine micro-batch interval.
    pub interval_ms: u64,
    pub phase: f64,
    pub partitions: u32,
    pub seed: u64,
    /// Wait after offering stops; two intervals plus 30 s when absent.
    pub drain_timeout_secs: Option<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            rate_per_min: 5_000.0,
            duration_secs: 180.0,
            interval_ms: 1_000,
            phase: 0.5,
            partitions: 4,
            seed: 42,
            drain_timeout_secs: None,
        }
    }
}

impl BenchConfig {
    pub fn drain_timeout(&self) -> Duration {
        let secs = self.drain_timeout_secs.unwrap_or(2.0 * self.interval_ms as f64 / 1_000.0 + 30.0);
        Duration::from_secs_f64(secs.max(0.0))
    }

    /// In-memory pipeline with no API, flushing and scoring on `interval_ms`.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.bus.partitions = self.partitions.max(1);
        config.ingest.interval_ms = Some(self.interval_ms.max(1));
        config.engine.interval_ms = self.interval_ms;
        config.engine.phase = self.phase;
        config.api.enabled = false;
        config
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BenchErrors {
    pub delivery_failures: u64,
    pub bus_errors: u64,
    pub ingest_rejected: u64,
    pub engine_rejected: u64,
    pub malformed_rows: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub offered: u64,
    pub source_records: u64,
    pub offered_per_min: f64,
    /// Pace the load thread actually held.
    pub generated_per_min: f64,
    pub achieved_per_min: f64,
    /// Wall time from the first offer to the last.
    pub offer_window_secs: f64,
    pub stored: u64,
    pub rejected: u64,
    pub lost: u64,
    /// Queueing delay included: produced_at to stored.
    pub latency_ms: Percentiles,
    /// Poll to stored only.
    pub processing_ms: Percentiles,
    pub errors: BenchErrors,
    pub drain_secs: f64,
    pub drained: bool,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let l = &self.latency_ms;
        let p = &self.processing_ms;
        format!(
            "offered {} envelopes ({} source records) at {:.0}/min ({:.1}/min held) over {:.1}s\n\
             achieved {:.1}/min: stored {}, rejected {}, lost {}\n\
             latency ms (produced to stored): p50 {} p95 {} p99 {} max {} mean {:.1}\n\
             processing ms (poll to stored): p50 {} p95 {} p99 {} max {}\n\
             errors: delivery {} bus {} ingest-rejected {} engine-rejected {} malformed {}\n\
             drained in {:.1}s{}",
            self.offered,
            self.source_records,
            self.offered_per_min,
            self.generated_per_min,
            self.offer_window_secs,
            self.achieved_per_min,
            self.stored,
            self.rejected,
            self.lost,
            l.p50,
            l.p95,
            l.p99,
            l.max,
            l.mean,
            p.p50,
            p.p95,
            p.p99,
            p.max,
            self.errors.delivery_failures,
            self.errors.bus_errors,
            self.errors.ingest_rejected,
            self.errors.engine_rejected,
            self.errors.malformed_rows,
            self.drain_secs,
            if self.drained { "" } else { " (drain timed out)" },
        )
    }

    /// Writes `bench_report.json` and `bench_report.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| SynthError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let json = dir.join("bench_report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self).expect("report serializes")).map_err(io(&json))?;
        let txt = dir.join("bench_report.txt");
        std::fs::write(&txt, self.summary() + "\n").map_err(io(&txt))?;
        Ok(())
    }
}

struct Baseline {
    profiles: u64,
    rejected: u64,
    ingest_rejected: u64,
    delivery_failures: u64,
    bus_errors: u64,
    malformed: u64,
}

impl Baseline {
    fn take(handle: &PipelineHandle) -> Self {
        let m = &handle.metrics;
        Baseline {
            profiles: handle.store.profile_count() as u64,
            rejected: Metrics::get(&m.records_rejected),
            ingest_rejected: Metrics::get(&m.ingest_rejected),
            delivery_failures: Metrics::get(&m.delivery_failures),
            bus_errors: Metrics::get(&m.bus_errors),
            malformed: Metrics::get(&m.malformed_rows),
        }
    }

    fn completed(&self, handle: &PipelineHandle) -> (u64, u64) {
        let m = &handle.metrics;
        let stored = handle.store.profile_count() as u64 - self.profiles;
        let rejected = Metrics::get(&m.records_rejected) - self.rejected + Metrics::get(&m.ingest_rejected)
            - self.ingest_rejected;
        (stored, rejected)
    }
}

/// Offers synthetic admissions to a healthy pipeline and waits for them to
/// be scored. Latency recorders on the pipeline are reset first.
pub fn run_benchmark(handle: &PipelineHandle, config: &BenchConfig) -> Result<BenchReport, SynthError> {
    let health = handle.health();
    let down: Vec<&str> = health.iter().filter(|(_, s)| **s != crate::api::ComponentStatus::Up).map(|(c, _)| c.as_str()).collect();
    if !down.is_empty() {
        return Err(SynthError::Unhealthy(down.join(", ")));
    }
    let injector = handle.injector().ok_or_else(|| SynthError::Unhealthy("producer disabled".into()))?;
    let positive = |x: f64| x > 0.0 && !x.is_nan();
    if !positive(config.rate_per_min) || !positive(config.duration_secs) {
        return Err(SynthError::Spec("rate and duration must be positive".into()));
    }
    let count = (config.rate_per_min * config.duration_secs / 60.0).floor() as u64;
    let per_token = Duration::from_secs_f64(60.0 / config.rate_per_min);
    let window = Duration::from_secs_f64(config.duration_secs);

    handle.metrics.end_to_end.clear();
    handle.metrics.processing.clear();
    let base = Baseline::take(handle);
    let spec = CohortSpec { seed: config.seed, ..CohortSpec::default() };
    let mut generator = PatientGenerator::new(spec)?.with_id_prefix(format!("B{}-", config.seed));
    let clock = Arc::clone(&handle.clock);

    let started = Instant::now();
    let load = std::thread::Builder::new()
        .name("bench-load".into())
        .spawn(move || {
            let mut records = 0u64;
            for i in 0..count {
                let due = started + per_token.saturating_mul(i as u32);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
                let mut patient = generator.next_patient();
                let now = clock.now();
                patient.records.iter_mut().for_each(|r| r.observed_at = now);
                records += patient.records.len() as u64;
                if !injector.send(patient.records) {
                    break;
                }
            }
            records
        })
        .map_err(|e| SynthError::Startup { component: "bench".into(), message: e.to_string() })?;
    let source_records = load.join().map_err(|_| SynthError::Unhealthy("load generator panicked".into()))?;
    let offered_done = Instant::now();

    let deadline = offered_done + config.drain_timeout();
    let drained = loop {
        let (stored, rejected) = base.completed(handle);
        if stored + rejected >= count {
            break true;
        }
        if Instant::now() >= deadline {
            break false;
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let drain_secs = offered_done.elapsed().as_secs_f64();
    let (stored, rejected) = base.completed(handle);
    let m = &handle.metrics;
    let span = offered_done - started;
    let generated_per_min = if count == 0 { 0.0 } else { count as f64 * 60.0 / (span + per_token).as_secs_f64() };
    Ok(BenchReport {
        config: config.clone(),
        offered: count,
        source_records,
        offered_per_min: config.rate_per_min,
        generated_per_min,
        achieved_per_min: (stored + rejected) as f64 * 60.0 / window.as_secs_f64(),
        offer_window_secs: span.as_secs_f64(),
        stored,
        rejected,
        lost: count.saturating_sub(stored + rejected),
        latency_ms: m.end_to_end.percentiles(),
        processing_ms: m.processing.percentiles(),
        errors: BenchErrors {
            delivery_failures: Metrics::get(&m.delivery_failures) - base.delivery_failures,
            bus_errors: Metrics::get(&m.bus_errors) - base.bus_errors,
            ingest_rejected: Metrics::get(&m.ingest_rejected) - base.ingest_rejected,
            engine_rejected: Metrics::get(&m.records_rejected) - base.rejected,
            malformed_rows: Metrics::get(&m.malformed_rows) - base.malformed,
        },
        drain_secs,
        drained,
    })
}
