//! The streaming engine: one worker per bus partition, each running timed
//! micro-batches of decode → validate → features → score → store → commit.
//!
//! Offsets are committed only after every record of the batch is stored, so
//! a crash between poll and commit causes redelivery. The store ignores
//! byte-identical and older rewrites, which turns at-least-once delivery
//! into effectively-once results.

pub mod metrics;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

pub use metrics::{percentiles, LatencyRecorder, Metrics, MetricsSnapshot, Percentiles};

use crate::domain::{validate_envelope, AdmissionEnvelope, Clock, RiskProfile};
use crate::features::{count_warnings, prepare, FeatureError, FeatureWarning, VariableSchema};
use crate::ingest::deserialize_envelope;
use crate::models::{score_all, ModelError, ModelSet, ThresholdTable, DEFAULT_TOP_CONTRIBUTORS};
use crate::store::{Store, StoreError};
use crate::streambus::{BusConsumer, BusError, LogRecord};

pub const DEFAULT_GROUP: &str = "engine";
pub const DEFAULT_MAX_BATCH: usize = 1_000;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("undecodable envelope: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("invalid envelope: {0}")]
    Invalid(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Schema, models and cutoffs: everything needed to turn an envelope into a
/// risk profile.
#[derive(Debug)]
pub struct Scorer {
    pub schema: VariableSchema,
    pub models: ModelSet,
    pub thresholds: ThresholdTable,
    pub top_n: usize,
    model_version: String,
}

impl Scorer {
    pub fn new(schema: VariableSchema, models: ModelSet, thresholds: ThresholdTable) -> Result<Self, EngineError> {
        schema.validate()?;
        thresholds.validate()?;
        let models = ModelSet::new(models.iter().map(|m| m.clone().aligned(&schema)).collect::<Result<Vec<_>, _>>()?)?;
        let model_version = models.version();
        Ok(Scorer { schema, models, thresholds, top_n: DEFAULT_TOP_CONTRIBUTORS, model_version })
    }

    /// Deterministic: `scored_at` is the envelope's `produced_at`.
    pub fn score(&self, env: &AdmissionEnvelope) -> Result<(RiskProfile, Vec<FeatureWarning>), EngineError> {
        let violations = validate_envelope(env);
        if !violations.is_empty() {
            let text = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            return Err(EngineError::Invalid(text));
        }
        let prepared = prepare(env, &self.schema)?;
        let frag = score_all(&self.models, &self.schema, &prepared.input, &self.thresholds, self.top_n)?;
        let profile = RiskProfile {
            key: env.key.clone(),
            scores: frag.scores,
            classes: frag.classes,
            contributors: frag.contributors,
            scored_at: env.produced_at,
            model_version: self.model_version.clone(),
        };
        Ok((profile, prepared.warnings))
    }
}

/// Returns true to simulate a crash after the record at `(partition, offset)`
/// was processed but before the batch is committed.
pub type FaultHook = Arc<dyn Fn(u32, u64) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct EngineConfig {
    pub topic: String,
    pub group: String,
    /// Micro-batch interval. Zero processes records as they arrive.
    pub interval: Duration,
    /// Tick offset within the interval, as a fraction of it.
    pub phase: f64,
    pub max_batch: usize,
    /// Reference instant for tick alignment; defaults to engine start.
    pub epoch: Option<Instant>,
    pub fault: Option<FaultHook>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            topic: "admissions".into(),
            group: DEFAULT_GROUP.into(),
            interval: Duration::from_secs(1),
            phase: 0.5,
            max_batch: DEFAULT_MAX_BATCH,
            epoch: None,
            fault: None,
        }
    }
}

impl std::fmt::Debug for EngineConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineConfig")
            .field("topic", &self.topic)
            .field("group", &self.group)
            .field("interval", &self.interval)
            .field("phase", &self.phase)
            .field("max_batch", &self.max_batch)
            .field("fault", &self.fault.is_some())
            .finish()
    }
}

/// Shared handles a worker needs.
#[derive(Clone)]
pub struct WorkerContext {
    pub bus: Arc<dyn BusConsumer>,
    pub store: Arc<Store>,
    pub scorer: Arc<Scorer>,
    pub metrics: Arc<Metrics>,
    pub clock: Arc<dyn Clock>,
    pub topic: String,
    pub group: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Idle,
    Committed { processed: usize, last_offset: u64 },
    /// The fault hook fired; nothing of this batch was committed.
    Crashed { processed: usize, at_offset: u64 },
}

fn handle_record(ctx: &WorkerContext, record: &LogRecord, polled: Instant) -> Result<(), EngineError> {
    let env = match deserialize_envelope(&record.payload) {
        Ok(env) => env,
        Err(e) => return reject(ctx, record, EngineError::Decode(e)),
    };
    let (profile, warnings) = match ctx.scorer.score(&env) {
        Ok(r) => r,
        Err(e) => return reject(ctx, record, e),
    };
    ctx.store.put_profile(&profile)?;
    ctx.metrics.add_warnings(count_warnings(&warnings));
    Metrics::add(&ctx.metrics.records_scored, 1);
    let now = ctx.clock.now();
    ctx.metrics.end_to_end.record(now.millis().saturating_sub(env.produced_at.millis()).max(0) as u64);
    ctx.metrics.processing.record(polled.elapsed().as_millis() as u64);
    Ok(())
}

fn reject(ctx: &WorkerContext, record: &LogRecord, err: EngineError) -> Result<(), EngineError> {
    log::warn!("rejecting record {}@{}: {err}", record.partition, record.offset);
    Metrics::add(&ctx.metrics.records_rejected, 1);
    Ok(())
}

/// One poll → process → commit cycle on one partition.
pub fn process_step(
    ctx: &WorkerContext,
    partition: u32,
    max_batch: usize,
    timeout: Duration,
    fault: Option<&FaultHook>,
) -> Result<StepOutcome, EngineError> {
    let poll = ctx.bus.poll_partition(&ctx.topic, &ctx.group, partition, max_batch, timeout)?;
    let polled = Instant::now();
    Metrics::add(&ctx.metrics.bus_gaps, poll.gaps);
    let Some(last) = poll.records.last().map(|r| r.offset) else {
        return Ok(StepOutcome::Idle);
    };
    for (i, record) in poll.records.iter().enumerate() {
        Metrics::add(&ctx.metrics.records_in, 1);
        handle_record(ctx, record, polled)?;
        if fault.is_some_and(|f| f(partition, record.offset)) {
            return Ok(StepOutcome::Crashed { processed: i + 1, at_offset: record.offset });
        }
    }
    ctx.bus.commit(&ctx.group, &ctx.topic, partition, last)?;
    Ok(StepOutcome::Committed { processed: poll.records.len(), last_offset: last })
}

/// Processes everything currently on `partition`; crashes are restarted from
/// the committed offset. Returns records processed, redeliveries included.
pub fn drain_partition(
    ctx: &WorkerContext,
    partition: u32,
    max_batch: usize,
    fault: Option<&FaultHook>,
) -> Result<usize, EngineError> {
    let mut total = 0;
    loop {
        match process_step(ctx, partition, max_batch, Duration::ZERO, fault)? {
            StepOutcome::Idle => return Ok(total),
            StepOutcome::Committed { processed, .. } => total += processed,
            StepOutcome::Crashed { processed, .. } => {
                total += processed;
                Metrics::add(&ctx.metrics.worker_restarts, 1);
            }
        }
    }
}

/// Stop flag that sleeping loops can wait on.
#[derive(Default)]
pub(crate) struct StopSignal {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl StopSignal {
    pub(crate) fn stop(&self) {
        *self.stopped.lock().expect("stop lock") = true;
        self.cv.notify_all();
    }

    /// Sleeps until `deadline`; true if stop was requested.
    pub(crate) fn wait_until(&self, deadline: Instant) -> bool {
        let mut stopped = self.stopped.lock().expect("stop lock");
        loop {
            if *stopped {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            stopped = self.cv.wait_timeout(stopped, deadline - now).expect("stop lock").0;
        }
    }

    pub(crate) fn is_stopped(&self) -> bool {
        *self.stopped.lock().expect("stop lock")
    }
}

/// First tick at or after `now` on the grid `epoch + (phase + k) * interval`.
pub fn next_tick(epoch: Instant, interval: Duration, phase: f64, now: Instant) -> Instant {
    let first = epoch + interval.mul_f64(phase.clamp(0.0, 1.0));
    if now <= first {
        return first;
    }
    let elapsed = (now - first).as_nanos();
    let step = interval.as_nanos().max(1);
    let k = elapsed.div_ceil(step);
    first + Duration::from_nanos((k * step) as u64)
}

/// Running worker threads.
pub struct Engine {
    workers: Vec<JoinHandle<()>>,
    stop: Arc<StopSignal>,
    alive: Arc<AtomicUsize>,
    partitions: u32,
}

impl Engine {
    pub fn start(ctx: WorkerContext, config: EngineConfig) -> Result<Self, EngineError> {
        let partitions = ctx.bus.partitions(&ctx.topic)?;
        let stop = Arc::new(StopSignal::default());
        let alive = Arc::new(AtomicUsize::new(0));
        let epoch = config.epoch.unwrap_or_else(Instant::now);
        let mut workers = Vec::new();
        for partition in 0..partitions {
            let (ctx, config, stop, alive) = (ctx.clone(), config.clone(), stop.clone(), alive.clone());
            alive.fetch_add(1, Ordering::SeqCst);
            let handle = std::thread::Builder::new()
                .name(format!("engine-p{partition}"))
                .spawn(move || {
                    worker_loop(&ctx, &config, partition, epoch, &stop);
                    alive.fetch_sub(1, Ordering::SeqCst);
                })
                .expect("spawn engine worker");
            workers.push(handle);
        }
        Ok(Engine { workers, stop, alive, partitions })
    }

    pub fn partitions(&self) -> u32 {
        self.partitions
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst) == self.partitions as usize && !self.stop.is_stopped()
    }

    /// Stops the workers after each drains what is on its partition.
    pub fn shutdown(self) {
        self.stop.stop();
        for w in self.workers {
            let _ = w.join();
        }
    }
}

fn worker_loop(ctx: &WorkerContext, config: &EngineConfig, partition: u32, epoch: Instant, stop: &StopSignal) {
    let fault = config.fault.as_ref();
    let continuous = config.interval.is_zero();
    loop {
        let stopping = if continuous {
            stop.is_stopped()
        } else {
            stop.wait_until(next_tick(epoch, config.interval, config.phase, Instant::now()))
        };
        let timeout = if continuous && !stopping { Duration::from_millis(100) } else { Duration::ZERO };
        // drain all that is available at this tick
        loop {
            match process_step(ctx, partition, config.max_batch, timeout, fault) {
                Ok(StepOutcome::Idle) => break,
                Ok(StepOutcome::Committed { .. }) => {}
                Ok(StepOutcome::Crashed { at_offset, .. }) => {
                    log::warn!("engine worker p{partition} crashed at offset {at_offset}, restarting");
                    Metrics::add(&ctx.metrics.worker_restarts, 1);
                }
                Err(e) => {
                    Metrics::add(&ctx.metrics.bus_errors, 1);
                    log::warn!("engine worker p{partition}: {e}");
                    if stopping {
                        return;
                    }
                    std::thread::sleep(Duration::from_millis(50));
                    break;
                }
            }
        }
        if stopping {
            return;
        }
    }
}
