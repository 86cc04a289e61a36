//! Whole-system wiring: bus, producer, engine workers, store and API in one
//! process, each piece optional so a deployment can split them.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::api::{self, ApiConfig, ApiState, ComponentStatus, HealthProbe};
use crate::domain::{AdmissionEnvelope, Clock, MonotonicClock, SourceRecord};
use crate::engine::{Engine, EngineConfig, Metrics, Scorer, StopSignal, WorkerContext, DEFAULT_GROUP, DEFAULT_MAX_BATCH};
use crate::features::VariableSchema;
use crate::ingest::{
    publish_batch, JoinState, RecordLedger, RetryPolicy, Scanner, SeenFileLedger, SourceBatch, SourceConfig,
    DEFAULT_GRACE_INTERVALS, DEFAULT_INTERVAL_SECS,
};
use crate::models::{ModelSet, ThresholdTable};
use crate::store::{Keyring, Sealer, Store, StoreConfig};
use crate::streambus::{BusClient, BusConsumer, BusError, BusProducer, BusServer, Broker, Durability};

pub const DEFAULT_TOPIC: &str = "admissions";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusSection {
    pub partitions: u32,
    /// Records kept per partition.
    pub retention: u64,
    /// Disk-backed log directory; in memory when absent.
    pub dir: Option<PathBuf>,
    /// Serve the local broker over TCP on this address.
    pub listen: Option<String>,
    /// Use a broker in another process instead of a local one.
    pub remote: Option<String>,
}

impl Default for BusSection {
    fn default() -> Self {
        BusSection { partitions: 4, retention: 1_000_000, dir: None, listen: None, remote: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub enabled: bool,
    /// Directories scanned for `<kind>_*.csv` files.
    pub sources: Vec<PathBuf>,
    /// Scan and flush period; `interval_ms` overrides it when set.
    pub interval_secs: u64,
    pub interval_ms: Option<u64>,
    pub topic: String,
    pub grace_intervals: u64,
    /// Seen-file ledger; in memory when absent.
    pub ledger: Option<PathBuf>,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            enabled: true,
            sources: Vec::new(),
            interval_secs: DEFAULT_INTERVAL_SECS,
            interval_ms: None,
            topic: DEFAULT_TOPIC.into(),
            grace_intervals: DEFAULT_GRACE_INTERVALS,
            ledger: None,
        }
    }
}

impl IngestSection {
    pub fn interval(&self) -> Duration {
        self.interval_ms.map(Duration::from_millis).unwrap_or(Duration::from_secs(self.interval_secs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub enabled: bool,
    pub group: String,
    /// Micro-batch interval; 0 polls continuously.
    pub interval_ms: u64,
    /// Offset of engine ticks within the interval, as a fraction.
    pub phase: f64,
    pub max_batch: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection { enabled: true, group: DEFAULT_GROUP.into(), interval_ms: 1_000, phase: 0.5, max_batch: DEFAULT_MAX_BATCH }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    /// Segment directory; in memory when absent.
    pub dir: Option<PathBuf>,
    /// Hex AES-256 key file.
    pub key_file: Option<PathBuf>,
    /// Environment variable holding a hex key.
    pub key_env: Option<String>,
    pub key_id: Option<String>,
    pub sync_writes: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    /// Variable schema; the bundled demo schema when absent.
    pub schema: Option<PathBuf>,
    /// Directory of `<code>.json` models; the bundled demo models when absent.
    pub models_dir: Option<PathBuf>,
    /// Cutoff table; the published cutoffs when absent.
    pub thresholds: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    pub enabled: bool,
    pub bind: String,
    pub auth: bool,
    /// `token clinician` lines.
    pub tokens_file: Option<PathBuf>,
    /// Inline token → clinician map, merged with the file.
    pub tokens: BTreeMap<String, String>,
    pub cors_origins: Vec<String>,
    pub static_dir: Option<PathBuf>,
    pub long_poll_timeout_ms: u64,
    pub page_size: usize,
}

impl Default for ApiSection {
    fn default() -> Self {
        ApiSection {
            enabled: true,
            bind: "127.0.0.1:8080".into(),
            auth: true,
            tokens_file: None,
            tokens: BTreeMap::new(),
            cors_origins: Vec::new(),
            static_dir: None,
            long_poll_timeout_ms: 25_000,
            page_size: api::DEFAULT_PAGE_SIZE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bus: BusSection,
    pub ingest: IngestSection,
    pub engine: EngineSection,
    pub store: StoreSection,
    pub models: ModelsSection,
    pub api: ApiSection,
}

impl PipelineConfig {
    /// Reads TOML, or JSON for a `.json` file. Relative paths are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let err = |message: String| SynthError::Config { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut config: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| err(e.to_string()))?
        };
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                fix(p)
            }
        };
        fix_opt(&mut self.bus.dir);
        self.ingest.sources.iter_mut().for_each(fix);
        fix_opt(&mut self.ingest.ledger);
        fix_opt(&mut self.store.dir);
        fix_opt(&mut self.store.key_file);
        fix_opt(&mut self.models.schema);
        fix_opt(&mut self.models.models_dir);
        fix_opt(&mut self.models.thresholds);
        fix_opt(&mut self.api.tokens_file);
        fix_opt(&mut self.api.static_dir);
    }

    pub fn engine_interval(&self) -> Duration {
        Duration::from_millis(self.engine.interval_ms)
    }
}

fn startup(component: &str, message: impl ToString) -> SynthError {
    SynthError::Startup { component: component.to_string(), message: message.to_string() }
}

/// Schema, models and cutoffs named by the config, or the bundled ones.
pub fn load_scorer(models: &ModelsSection) -> Result<Scorer, SynthError> {
    let schema = match &models.schema {
        Some(p) => VariableSchema::load(p).map_err(|e| startup("schema", e))?,
        None => VariableSchema::demo(),
    };
    let set = match &models.models_dir {
        Some(dir) => ModelSet::load_dir(dir, &schema).map_err(|e| startup("models", e))?,
        None => ModelSet::demo(&schema).map_err(|e| startup("models", e))?,
    };
    let thresholds = match &models.thresholds {
        Some(p) => ThresholdTable::load(p).map_err(|e| startup("thresholds", e))?,
        None => ThresholdTable::published(),
    };
    Scorer::new(schema, set, thresholds).map_err(|e| startup("models", e))
}

fn open_store(section: &StoreSection, clock: Arc<dyn Clock>) -> Result<Store, SynthError> {
    let key_id = section.key_id.clone().unwrap_or_else(|| "k1".into());
    let keyring = match (&section.key_file, &section.key_env) {
        (Some(file), _) => Some(Keyring::from_key_file(file, &key_id)),
        (None, Some(var)) => Some(Keyring::from_env(var, &key_id)),
        (None, None) => None,
    };
    let sealer = match keyring {
        Some(ring) => Sealer::new(ring.map_err(|e| startup("store", e))?, key_id).map_err(|e| startup("store", e))?,
        None if section.dir.is_some() => return Err(startup("store", "a disk store needs key_file or key_env")),
        None => Sealer::ephemeral(),
    };
    let config = match &section.dir {
        Some(dir) => StoreConfig { sync_writes: section.sync_writes, ..StoreConfig::disk(dir) },
        None => StoreConfig::memory(),
    };
    Store::open_with_clock(config, Some(sealer), clock).map_err(|e| startup("store", e))
}

fn api_config(section: &ApiSection, bind: SocketAddr) -> Result<ApiConfig, SynthError> {
    let mut tokens = match &section.tokens_file {
        Some(p) => ApiConfig::load_tokens(p).map_err(|e| startup("api", e))?,
        None => BTreeMap::new(),
    };
    tokens.extend(section.tokens.clone());
    let config = ApiConfig {
        bind,
        auth_enabled: section.auth,
        tokens,
        cors_origins: section.cors_origins.clone(),
        poll_page_size: section.page_size.max(1),
        long_poll_timeout: Duration::from_millis(section.long_poll_timeout_ms),
        static_dir: section.static_dir.clone(),
    };
    config.validate().map_err(|e| startup("api", e))?;
    Ok(config)
}

/// Join state plus a retry queue of envelopes the bus did not take.
pub struct Producer {
    join: JoinState,
    bus: Arc<dyn BusProducer>,
    topic: String,
    policy: RetryPolicy,
    metrics: Arc<Metrics>,
    backlog: Vec<AdmissionEnvelope>,
}

impl Producer {
    pub fn new(bus: Arc<dyn BusProducer>, topic: impl Into<String>, grace: u64, metrics: Arc<Metrics>) -> Self {
        Producer {
            join: JoinState::new(grace),
            bus,
            topic: topic.into(),
            policy: RetryPolicy::default(),
            metrics,
            backlog: Vec::new(),
        }
    }

    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Joins one interval's records and publishes every ready envelope,
    /// retried ones first. Returns envelopes delivered.
    pub fn flush(&mut self, batch: SourceBatch) -> usize {
        Metrics::add(&self.metrics.records_parsed, batch.total() as u64);
        Metrics::add(&self.metrics.malformed_rows, batch.malformed_rows as u64);
        let outcome = self.join.apply(batch);
        Metrics::add(&self.metrics.orphans, outcome.report.orphans.values().sum::<usize>() as u64);
        Metrics::add(&self.metrics.ingest_rejected, outcome.report.rejected as u64);
        let mut ready = std::mem::take(&mut self.backlog);
        ready.extend(outcome.envelopes);
        let delivered = match publish_batch(&ready, self.bus.as_ref(), &self.topic, self.policy) {
            Ok(_) => ready.len(),
            Err(failure) => {
                log::warn!("{failure}; {} envelopes queued for the next interval", failure.total - failure.delivered);
                Metrics::add(&self.metrics.delivery_failures, 1);
                self.backlog = ready.split_off(failure.delivered);
                failure.delivered
            }
        };
        Metrics::add(&self.metrics.envelopes_published, delivered as u64);
        delivered
    }

    pub fn backlog(&self) -> usize {
        self.backlog.len()
    }

    pub fn ledger(&self) -> RecordLedger {
        self.join.ledger()
    }
}

/// Feeds records straight into the producer, bypassing the file scan. Each
/// send lands in a single interval.
#[derive(Clone)]
pub struct Injector(Sender<Vec<SourceRecord>>);

impl Injector {
    /// False once the producer has stopped.
    pub fn send(&self, records: Vec<SourceRecord>) -> bool {
        self.0.send(records).is_ok()
    }
}

struct ProducerThread {
    stop: Arc<StopSignal>,
    handle: JoinHandle<Producer>,
    alive: Arc<AtomicBool>,
}

struct ApiThread {
    addr: SocketAddr,
    shutdown: tokio::sync::oneshot::Sender<()>,
    handle: JoinHandle<std::io::Result<()>>,
    alive: Arc<AtomicBool>,
}

#[derive(Clone)]
enum BusHandle {
    Local(Arc<Broker>),
    Remote(Arc<BusClient>),
}

impl BusHandle {
    fn producer(&self) -> Arc<dyn BusProducer> {
        match self {
            BusHandle::Local(b) => b.clone(),
            BusHandle::Remote(c) => c.clone(),
        }
    }

    fn consumer(&self) -> Arc<dyn BusConsumer> {
        match self {
            BusHandle::Local(b) => b.clone(),
            BusHandle::Remote(c) => c.clone(),
        }
    }

    fn is_up(&self, topic: &str) -> bool {
        match self {
            BusHandle::Local(b) => b.is_running(),
            BusHandle::Remote(c) => c.describe_topic(topic).is_ok(),
        }
    }
}

struct PipelineHealth {
    bus: BusHandle,
    topic: String,
    engine: Arc<Mutex<Option<Engine>>>,
    engine_enabled: bool,
    producer: Option<Arc<AtomicBool>>,
}

impl HealthProbe for PipelineHealth {
    fn components(&self) -> BTreeMap<String, ComponentStatus> {
        let status = |up: bool| if up { ComponentStatus::Up } else { ComponentStatus::Down };
        let mut out = BTreeMap::new();
        out.insert("api".to_string(), ComponentStatus::Up);
        out.insert("store".to_string(), ComponentStatus::Up);
        out.insert("bus".to_string(), status(self.bus.is_up(&self.topic)));
        if self.engine_enabled {
            let alive = self.engine.lock().expect("engine lock").as_ref().is_some_and(Engine::is_alive);
            out.insert("engine".to_string(), status(alive));
        }
        if let Some(p) = &self.producer {
            out.insert("producer".to_string(), status(p.load(Ordering::SeqCst)));
        }
        out
    }
}

/// Envelope accounting after a drain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub published: u64,
    pub scored: u64,
    pub rejected: u64,
    /// Envelopes the bus never accepted.
    pub undelivered: u64,
    pub join: RecordLedger,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.published == self.scored + self.rejected && self.join.balanced()
    }
}

/// A running pipeline. Dropping it without `shutdown` leaves threads running.
pub struct PipelineHandle {
    pub store: Arc<Store>,
    pub metrics: Arc<Metrics>,
    pub scorer: Arc<Scorer>,
    pub clock: Arc<dyn Clock>,
    pub epoch: Instant,
    pub config: PipelineConfig,
    bus: BusHandle,
    bus_server: Option<BusServer>,
    engine: Arc<Mutex<Option<Engine>>>,
    producer: Option<ProducerThread>,
    injector: Option<Injector>,
    api: Option<ApiThread>,
    health: Arc<PipelineHealth>,
}

/// Boots every enabled component. Missing files, bad keys and busy ports
/// fail here, naming the component.
pub fn run_pipeline(config: PipelineConfig) -> Result<PipelineHandle, SynthError> {
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let scorer = Arc::new(load_scorer(&config.models)?);
    let store = Arc::new(open_store(&config.store, clock.clone())?);
    let metrics = Arc::new(Metrics::default());
    let topic = config.ingest.topic.clone();

    let (bus, bus_server) = match &config.bus.remote {
        Some(addr) => {
            let client = BusClient::new(addr.as_str(), None).map_err(|e| startup("bus", format!("{addr}: {e}")))?;
            match client.describe_topic(&topic) {
                Ok(_) => {}
                Err(BusError::UnknownTopic(_)) => {
                    client.create_topic(&topic, config.bus.partitions, config.bus.retention).map_err(|e| startup("bus", e))?;
                }
                Err(e) => return Err(startup("bus", format!("{addr}: {e}"))),
            }
            (BusHandle::Remote(Arc::new(client)), None)
        }
        None => {
            let durability = match &config.bus.dir {
                Some(dir) => Durability::Disk { dir: dir.clone() },
                None => Durability::Memory,
            };
            let broker =
                Arc::new(Broker::with_clock(durability, clock.clone()).map_err(|e| startup("bus", e))?);
            if broker.topic(&topic).is_err() {
                broker.create_topic(&topic, config.bus.partitions, config.bus.retention).map_err(|e| startup("bus", e))?;
            }
            let server = match &config.bus.listen {
                Some(addr) => Some(
                    BusServer::bind(addr.as_str(), broker.clone(), None)
                        .map_err(|e| startup("bus", format!("{addr}: {e}")))?,
                ),
                None => None,
            };
            (BusHandle::Local(broker), server)
        }
    };

    let epoch = Instant::now();
    let engine = Arc::new(Mutex::new(None));
    if config.engine.enabled {
        let ctx = WorkerContext {
            bus: bus.consumer(),
            store: store.clone(),
            scorer: scorer.clone(),
            metrics: metrics.clone(),
            clock: clock.clone(),
            topic: topic.clone(),
            group: config.engine.group.clone(),
        };
        let engine_config = EngineConfig {
            topic: topic.clone(),
            group: config.engine.group.clone(),
            interval: config.engine_interval(),
            phase: config.engine.phase,
            max_batch: config.engine.max_batch.max(1),
            epoch: Some(epoch),
            fault: None,
        };
        *engine.lock().expect("engine lock") = Some(Engine::start(ctx, engine_config).map_err(|e| startup("engine", e))?);
    }

    let (producer, injector) = if config.ingest.enabled {
        let (tx, rx) = mpsc::channel();
        let ledger = match &config.ingest.ledger {
            Some(p) => SeenFileLedger::load(p).map_err(|e| startup("ingest", e))?,
            None => SeenFileLedger::in_memory(),
        };
        for dir in &config.ingest.sources {
            if !dir.is_dir() {
                return Err(startup("ingest", format!("source directory {} not found", dir.display())));
            }
        }
        let scanner = (!config.ingest.sources.is_empty())
            .then(|| Scanner::new(SourceConfig { dirs: config.ingest.sources.clone() }, ledger, clock.clone()));
        let producer = Producer::new(bus.producer(), topic.clone(), config.ingest.grace_intervals, metrics.clone());
        let thread = spawn_producer(producer, scanner, rx, epoch, config.ingest.interval())?;
        (Some(thread), Some(Injector(tx)))
    } else {
        (None, None)
    };

    let health = Arc::new(PipelineHealth {
        bus: bus.clone(),
        topic: topic.clone(),
        engine: engine.clone(),
        engine_enabled: config.engine.enabled,
        producer: producer.as_ref().map(|p| p.alive.clone()),
    });

    let mut handle = PipelineHandle {
        store,
        metrics,
        scorer,
        clock,
        epoch,
        config,
        bus,
        bus_server,
        engine,
        producer,
        injector,
        api: None,
        health,
    };
    if handle.config.api.enabled {
        match start_api(&handle) {
            Ok(api) => handle.api = Some(api),
            Err(e) => {
                handle.shutdown();
                return Err(e);
            }
        }
    }
    Ok(handle)
}

fn spawn_producer(
    mut producer: Producer,
    mut scanner: Option<Scanner>,
    rx: Receiver<Vec<SourceRecord>>,
    epoch: Instant,
    interval: Duration,
) -> Result<ProducerThread, SynthError> {
    let stop = Arc::new(StopSignal::default());
    let alive = Arc::new(AtomicBool::new(true));
    let (s, a) = (stop.clone(), alive.clone());
    let interval = interval.max(Duration::from_millis(1));
    let handle = std::thread::Builder::new()
        .name("producer".into())
        .spawn(move || {
            let mut k: u64 = 1;
            loop {
                // flush on the grid epoch + k * interval, skipping missed ticks
                let behind = (epoch.elapsed().as_nanos() / interval.as_nanos()) as u64;
                k = k.max(behind + 1);
                let stopping = s.wait_until(epoch + interval.saturating_mul(k as u32));
                let mut batch = SourceBatch::new(k);
                while let Ok(records) = rx.try_recv() {
                    records.into_iter().for_each(|r| batch.push(r));
                }
                if let Some(scanner) = scanner.as_mut() {
                    match scanner.scan() {
                        Ok(scanned) => {
                            batch.malformed_rows += scanned.malformed_rows;
                            for r in scanned.into_records() {
                                batch.push(r);
                            }
                        }
                        Err(e) => log::warn!("source scan failed: {e}"),
                    }
                }
                producer.flush(batch);
                k += 1;
                if stopping {
                    if producer.backlog() > 0 {
                        producer.flush(SourceBatch::new(k));
                    }
                    a.store(false, Ordering::SeqCst);
                    return producer;
                }
            }
        })
        .map_err(|e| startup("ingest", e))?;
    Ok(ProducerThread { stop, handle, alive })
}

fn start_api(handle: &PipelineHandle) -> Result<ApiThread, SynthError> {
    let section = &handle.config.api;
    let listener =
        std::net::TcpListener::bind(section.bind.as_str()).map_err(|e| startup("api", format!("{}: {e}", section.bind)))?;
    listener.set_nonblocking(true).map_err(|e| startup("api", e))?;
    let addr = listener.local_addr().map_err(|e| startup("api", e))?;
    let config = api_config(section, addr)?;
    let state = ApiState {
        store: handle.store.clone(),
        metrics: handle.metrics.clone(),
        thresholds: Arc::new(handle.scorer.thresholds.clone()),
        health: handle.health.clone(),
        clock: handle.clock.clone(),
        config: Arc::new(config),
    };
    let (tx, rx) = tokio::sync::oneshot::channel();
    let alive = Arc::new(AtomicBool::new(true));
    let a = alive.clone();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .thread_name("api")
        .enable_all()
        .build()
        .map_err(|e| startup("api", e))?;
    let thread = std::thread::Builder::new()
        .name("api-main".into())
        .spawn(move || {
            let result = runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                api::serve(listener, state, async move {
                    let _ = rx.await;
                })
                .await
            });
            a.store(false, Ordering::SeqCst);
            result
        })
        .map_err(|e| startup("api", e))?;
    Ok(ApiThread { addr, shutdown: tx, handle: thread, alive })
}

impl PipelineHandle {
    pub fn api_addr(&self) -> Option<SocketAddr> {
        self.api.as_ref().map(|a| a.addr)
    }

    pub fn bus_addr(&self) -> Option<SocketAddr> {
        self.bus_server.as_ref().map(BusServer::local_addr)
    }

    /// The in-process broker, when not using a remote one.
    pub fn broker(&self) -> Option<&Arc<Broker>> {
        match &self.bus {
            BusHandle::Local(b) => Some(b),
            BusHandle::Remote(_) => None,
        }
    }

    pub fn injector(&self) -> Option<Injector> {
        self.injector.clone()
    }

    pub fn health(&self) -> BTreeMap<String, ComponentStatus> {
        let mut c = self.health.components();
        if let Some(api) = &self.api {
            c.insert("api".into(), if api.alive.load(Ordering::SeqCst) { ComponentStatus::Up } else { ComponentStatus::Down });
        }
        c
    }

    pub fn is_healthy(&self) -> bool {
        self.health().values().all(|s| *s == ComponentStatus::Up)
    }

    /// Polls until healthy or `timeout`.
    pub fn wait_healthy(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_healthy() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn conservation(&self) -> Conservation {
        let m = &self.metrics;
        Conservation {
            published: Metrics::get(&m.envelopes_published),
            scored: Metrics::get(&m.records_scored),
            rejected: Metrics::get(&m.records_rejected),
            undelivered: 0,
            join: RecordLedger::default(),
        }
    }

    /// Stops in dependency order: final producer flush, engine drain, API,
    /// bus server.
    pub fn shutdown(mut self) -> Conservation {
        self.injector = None;
        let mut conservation = self.conservation();
        if let Some(p) = self.producer.take() {
            p.stop.stop();
            if let Ok(producer) = p.handle.join() {
                conservation.undelivered = producer.backlog() as u64;
                conservation.join = producer.ledger();
            }
        }
        if let Some(engine) = self.engine.lock().expect("engine lock").take() {
            engine.shutdown();
        }
        if let Some(api) = self.api.take() {
            let _ = api.shutdown.send(());
            let _ = api.handle.join();
        }
        if let Some(server) = self.bus_server.take() {
            server.shutdown();
        }
        let after = self.conservation();
        Conservation { published: after.published, scored: after.scored, rejected: after.rejected, ..conservation }
    }
}
