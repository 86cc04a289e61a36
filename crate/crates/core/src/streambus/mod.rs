//! Embedded partitioned commit log.
//!
//! Topics have a fixed number of partitions; a record's partition is
//! `fnv1a64(key) % partitions`, so equal keys always share a partition and
//! are observed in append order. Consumer groups track, per partition, the
//! offset of the last record they finished; polls resume right after it and
//! never advance it themselves (at-least-once).
//!
//! Two durability modes: in-memory, and append-only segment files plus one
//! group-offset file per group that is fsynced on every commit.

mod segment;
pub mod tcp;

pub use tcp::{BusClient, BusServer};

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::domain::{Clock, SystemClock, Timestamp};
use segment::SegmentLog;

/// Records per segment file before rolling (disk mode).
pub const DEFAULT_SEGMENT_RECORDS: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("topic {0:?} already exists")]
    DuplicateTopic(String),
    #[error("partitions must be ≥ 1")]
    InvalidPartitions,
    #[error("retention must be > 0")]
    InvalidRetention,
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic {topic:?} has no partition {partition}")]
    UnknownPartition { topic: String, partition: u32 },
    #[error("offset {offset} is beyond high-watermark {high_watermark}")]
    OffsetBeyondHighWatermark { offset: u64, high_watermark: u64 },
    #[error("bus unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl BusError {
    /// Worth retrying: the bus may come back.
    pub fn is_transient(&self) -> bool {
        matches!(self, BusError::Unavailable(_) | BusError::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, BusError>;

/// FNV-1a, 64-bit. Fixed so partition assignment is reproducible everywhere.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn partition_for(key: &[u8], partitions: u32) -> u32 {
    (stable_hash(key) % u64::from(partitions)) as u32
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub partitions: u32,
    /// Max records kept per partition.
    pub retention: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub partition: u32,
    pub offset: u64,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
    pub appended_at: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PollResult {
    pub records: Vec<LogRecord>,
    /// Records that were evicted before this group read them.
    pub gaps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerGroupState {
    pub group: String,
    /// topic → partition → offset of the last processed record.
    pub committed: BTreeMap<String, BTreeMap<u32, u64>>,
}

#[derive(Clone, Debug, Default)]
pub enum Durability {
    #[default]
    Memory,
    Disk { dir: PathBuf },
}

/// Anything that can take an append; the in-process broker and the TCP
/// client both qualify.
pub trait BusProducer: Send + Sync {
    fn append(&self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64)>;
}

/// Read side used by the engine, satisfied by the broker and the TCP client.
pub trait BusConsumer: Send + Sync {
    fn partitions(&self, topic: &str) -> Result<u32>;
    fn poll_partition(
        &self,
        topic: &str,
        group: &str,
        partition: u32,
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult>;
    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()>;
}

impl<T: BusConsumer + ?Sized> BusConsumer for Arc<T> {
    fn partitions(&self, topic: &str) -> Result<u32> {
        (**self).partitions(topic)
    }

    fn poll_partition(
        &self,
        topic: &str,
        group: &str,
        partition: u32,
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult> {
        (**self).poll_partition(topic, group, partition, max_records, timeout)
    }

    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()> {
        (**self).commit(group, topic, partition, offset)
    }
}

struct PartitionLog {
    low: u64,
    high: u64,
    records: VecDeque<LogRecord>,
    disk: Option<SegmentLog>,
}

impl PartitionLog {
    fn in_memory() -> Self {
        PartitionLog { low: 0, high: 0, records: VecDeque::new(), disk: None }
    }

    fn append(&mut self, partition: u32, key: &[u8], payload: &[u8], at: Timestamp, retention: u64) -> Result<u64> {
        let offset = self.high;
        let record = LogRecord { partition, offset, key: key.to_vec(), payload: payload.to_vec(), appended_at: at };
        if let Some(disk) = self.disk.as_mut() {
            disk.append(&record)?;
        }
        self.records.push_back(record);
        self.high += 1;
        while self.high - self.low > retention {
            self.records.pop_front();
            self.low += 1;
        }
        if let Some(disk) = self.disk.as_mut() {
            disk.evict_below(self.low)?;
        }
        Ok(offset)
    }

    fn read_from(&self, start: u64, max: usize, out: &mut Vec<LogRecord>) {
        if start >= self.high || max == 0 {
            return;
        }
        let skip = (start - self.low) as usize;
        out.extend(self.records.iter().skip(skip).take(max).cloned());
    }
}

struct TopicLog {
    topic: Topic,
    partitions: Vec<Mutex<PartitionLog>>,
    /// Bumped on every append; pollers wait on it.
    generation: Mutex<u64>,
    appended: Condvar,
}

/// The broker: topics, partitions and consumer-group offsets.
pub struct Broker {
    durability: Durability,
    segment_records: usize,
    clock: Arc<dyn Clock>,
    topics: RwLock<HashMap<String, Arc<TopicLog>>>,
    groups: Mutex<HashMap<String, ConsumerGroupState>>,
    running: AtomicBool,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker").field("durability", &self.durability).finish_non_exhaustive()
    }
}

impl Broker {
    pub fn in_memory() -> Self {
        Broker::with_clock(Durability::Memory, Arc::new(SystemClock)).expect("memory broker cannot fail")
    }

    /// Opens a broker; disk mode recovers topics, watermarks and group offsets.
    pub fn open(durability: Durability) -> Result<Self> {
        Broker::with_clock(durability, Arc::new(SystemClock))
    }

    pub fn with_clock(durability: Durability, clock: Arc<dyn Clock>) -> Result<Self> {
        Broker::build(durability, clock, DEFAULT_SEGMENT_RECORDS)
    }

    pub fn with_segment_records(durability: Durability, segment_records: usize) -> Result<Self> {
        Broker::build(durability, Arc::new(SystemClock), segment_records.max(1))
    }

    fn build(durability: Durability, clock: Arc<dyn Clock>, segment_records: usize) -> Result<Self> {
        let broker = Broker {
            durability,
            segment_records,
            clock,
            topics: RwLock::new(HashMap::new()),
            groups: Mutex::new(HashMap::new()),
            running: AtomicBool::new(true),
        };
        if let Durability::Disk { dir } = &broker.durability {
            fs::create_dir_all(dir.join("topics"))?;
            fs::create_dir_all(dir.join("groups"))?;
            broker.recover(dir.clone())?;
        }
        Ok(broker)
    }

    fn recover(&self, dir: PathBuf) -> Result<()> {
        let mut topics = self.topics.write().expect("topics lock");
        for entry in fs::read_dir(dir.join("topics"))? {
            let path = entry?.path();
            let meta_path = path.join("topic.json");
            if !meta_path.is_file() {
                continue;
            }
            let topic: Topic = serde_json::from_slice(&fs::read(&meta_path)?)
                .map_err(|e| BusError::Protocol(format!("{}: {e}", meta_path.display())))?;
            let mut parts = Vec::with_capacity(topic.partitions as usize);
            for p in 0..topic.partitions {
                let (log, records, high) =
                    SegmentLog::recover(&path.join(format!("p{p}")), self.segment_records)?;
                let low = high.saturating_sub(topic.retention).max(records.first().map_or(high, |r| r.offset));
                let records: VecDeque<LogRecord> = records.into_iter().filter(|r| r.offset >= low).collect();
                let mut part = PartitionLog { low, high, records, disk: Some(log) };
                if let Some(disk) = part.disk.as_mut() {
                    disk.evict_below(low)?;
                }
                parts.push(Mutex::new(part));
            }
            let log = TopicLog {
                topic: topic.clone(),
                partitions: parts,
                generation: Mutex::new(0),
                appended: Condvar::new(),
            };
            topics.insert(topic.name.clone(), Arc::new(log));
        }
        let mut groups = self.groups.lock().expect("groups lock");
        for entry in fs::read_dir(dir.join("groups"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let state: ConsumerGroupState = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| BusError::Protocol(format!("{}: {e}", path.display())))?;
            groups.insert(state.group.clone(), state);
        }
        Ok(())
    }

    pub fn create_topic(&self, name: &str, partitions: u32, retention: u64) -> Result<Topic> {
        self.ensure_running()?;
        if partitions == 0 {
            return Err(BusError::InvalidPartitions);
        }
        if retention == 0 {
            return Err(BusError::InvalidRetention);
        }
        let mut topics = self.topics.write().expect("topics lock");
        if topics.contains_key(name) {
            return Err(BusError::DuplicateTopic(name.to_string()));
        }
        let topic = Topic { name: name.to_string(), partitions, retention };
        let mut parts = Vec::with_capacity(partitions as usize);
        match &self.durability {
            Durability::Memory => parts.extend((0..partitions).map(|_| Mutex::new(PartitionLog::in_memory()))),
            Durability::Disk { dir } => {
                let tdir = dir.join("topics").join(encode_name(name));
                fs::create_dir_all(&tdir)?;
                for p in 0..partitions {
                    let (log, _, _) = SegmentLog::recover(&tdir.join(format!("p{p}")), self.segment_records)?;
                    parts.push(Mutex::new(PartitionLog { low: 0, high: 0, records: VecDeque::new(), disk: Some(log) }));
                }
                write_durably(&tdir.join("topic.json"), &serde_json::to_vec(&topic).expect("topic serializes"))?;
            }
        }
        topics.insert(
            name.to_string(),
            Arc::new(TopicLog { topic: topic.clone(), partitions: parts, generation: Mutex::new(0), appended: Condvar::new() }),
        );
        Ok(topic)
    }

    pub fn topic(&self, name: &str) -> Result<Topic> {
        Ok(self.topic_log(name)?.topic.clone())
    }

    fn topic_log(&self, name: &str) -> Result<Arc<TopicLog>> {
        self.topics
            .read()
            .expect("topics lock")
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::UnknownTopic(name.to_string()))
    }

    fn ensure_running(&self) -> Result<()> {
        if self.running.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(BusError::Unavailable("broker stopped".into()))
        }
    }

    pub fn append(&self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64)> {
        self.ensure_running()?;
        let log = self.topic_log(topic)?;
        let partition = partition_for(key, log.topic.partitions);
        let offset = {
            let mut part = log.partitions[partition as usize].lock().expect("partition lock");
            part.append(partition, key, payload, self.clock.now(), log.topic.retention)?
        };
        *log.generation.lock().expect("generation lock") += 1;
        log.appended.notify_all();
        Ok((partition, offset))
    }

    /// (low-watermark, high-watermark) of one partition.
    pub fn watermarks(&self, topic: &str, partition: u32) -> Result<(u64, u64)> {
        let log = self.topic_log(topic)?;
        let part = log.partition(partition)?.lock().expect("partition lock");
        Ok((part.low, part.high))
    }

    pub fn committed(&self, group: &str, topic: &str, partition: u32) -> Option<u64> {
        self.groups.lock().expect("groups lock").get(group)?.committed.get(topic)?.get(&partition).copied()
    }

    pub fn group_state(&self, group: &str) -> Option<ConsumerGroupState> {
        self.groups.lock().expect("groups lock").get(group).cloned()
    }

    /// Polls every partition of `topic`, lowest index first.
    pub fn poll(&self, topic: &str, group: &str, max_records: usize, timeout: Duration) -> Result<PollResult> {
        let log = self.topic_log(topic)?;
        let all: Vec<u32> = (0..log.topic.partitions).collect();
        self.poll_partitions(&log, group, &all, max_records, timeout)
    }

    /// Polls a single partition, for statically assigned consumers.
    pub fn poll_partition(
        &self,
        topic: &str,
        group: &str,
        partition: u32,
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult> {
        let log = self.topic_log(topic)?;
        log.partition(partition)?;
        self.poll_partitions(&log, group, &[partition], max_records, timeout)
    }

    fn poll_partitions(
        &self,
        log: &TopicLog,
        group: &str,
        partitions: &[u32],
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult> {
        self.ensure_running()?;
        let deadline = Instant::now() + timeout;
        loop {
            let generation = *log.generation.lock().expect("generation lock");
            let result = self.read_available(log, group, partitions, max_records);
            let now = Instant::now();
            if !result.records.is_empty() || now >= deadline || max_records == 0 {
                return Ok(result);
            }
            let guard = log.generation.lock().expect("generation lock");
            if *guard == generation {
                let _ = log.appended.wait_timeout(guard, deadline - now).expect("generation lock");
            }
            self.ensure_running()?;
        }
    }

    fn read_available(&self, log: &TopicLog, group: &str, partitions: &[u32], max_records: usize) -> PollResult {
        let mut result = PollResult::default();
        for &p in partitions {
            let remaining = max_records - result.records.len();
            if remaining == 0 {
                break;
            }
            let next = self.committed(group, &log.topic.name, p).map_or(0, |c| c + 1);
            let part = log.partitions[p as usize].lock().expect("partition lock");
            let start = if next < part.low {
                result.gaps += part.low - next;
                part.low
            } else {
                next
            };
            part.read_from(start, remaining, &mut result.records);
        }
        result
    }

    /// Marks `offset` as processed; the next poll starts at `offset + 1`.
    pub fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()> {
        self.ensure_running()?;
        let log = self.topic_log(topic)?;
        let high = log.partition(partition)?.lock().expect("partition lock").high;
        if offset >= high {
            return Err(BusError::OffsetBeyondHighWatermark { offset, high_watermark: high });
        }
        let mut groups = self.groups.lock().expect("groups lock");
        let state = groups
            .entry(group.to_string())
            .or_insert_with(|| ConsumerGroupState { group: group.to_string(), committed: BTreeMap::new() });
        state.committed.entry(topic.to_string()).or_default().insert(partition, offset);
        if let Durability::Disk { dir } = &self.durability {
            let path = dir.join("groups").join(format!("{}.json", encode_name(group)));
            write_durably(&path, &serde_json::to_vec(state).expect("group state serializes"))?;
        }
        Ok(())
    }

    /// Stops accepting requests; pending polls return `Unavailable`.
    pub fn shutdown(&self) {
        self.running.store(false, Ordering::SeqCst);
        for log in self.topics.read().expect("topics lock").values() {
            *log.generation.lock().expect("generation lock") += 1;
            log.appended.notify_all();
        }
    }

    pub fn resume(&self) {
        self.running.store(true, Ordering::SeqCst);
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::SeqCst)
    }
}

impl BusConsumer for Broker {
    fn partitions(&self, topic: &str) -> Result<u32> {
        Ok(self.topic(topic)?.partitions)
    }

    fn poll_partition(
        &self,
        topic: &str,
        group: &str,
        partition: u32,
        max_records: usize,
        timeout: Duration,
    ) -> Result<PollResult> {
        Broker::poll_partition(self, topic, group, partition, max_records, timeout)
    }

    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()> {
        Broker::commit(self, group, topic, partition, offset)
    }
}

impl BusProducer for Broker {
    fn append(&self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64)> {
        Broker::append(self, topic, key, payload)
    }
}

impl<T: BusProducer + ?Sized> BusProducer for Arc<T> {
    fn append(&self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64)> {
        (**self).append(topic, key, payload)
    }
}

impl TopicLog {
    fn partition(&self, partition: u32) -> Result<&Mutex<PartitionLog>> {
        self.partitions
            .get(partition as usize)
            .ok_or_else(|| BusError::UnknownPartition { topic: self.topic.name.clone(), partition })
    }
}

/// Topic and group names become file names; keep them filesystem-safe.
fn encode_name(name: &str) -> String {
    name.bytes()
        .map(|b| {
            if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
                (b as char).to_string()
            } else {
                format!("%{b:02X}")
            }
        })
        .collect()
}

/// Write-to-temp, fsync, rename, fsync directory.
fn write_durably(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        if let Ok(d) = fs::File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NO_WAIT: Duration = Duration::ZERO;

    #[test]
    fn fnv1a_reference_vectors() {
        assert_eq!(stable_hash(b""), 0xcbf29ce484222325);
        assert_eq!(stable_hash(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(stable_hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn create_topic_rules() {
        let b = Broker::in_memory();
        let t = b.create_topic("admissions", 4, 100_000).unwrap();
        assert_eq!(t.partitions, 4);
        for p in 0..4 {
            assert_eq!(b.watermarks("admissions", p).unwrap(), (0, 0));
        }
        let err = b.create_topic("x", 0, 10).unwrap_err();
        assert_eq!(err.to_string(), "partitions must be ≥ 1");
        assert!(matches!(b.create_topic("admissions", 4, 10), Err(BusError::DuplicateTopic(_))));
        assert!(matches!(b.create_topic("y", 1, 0), Err(BusError::InvalidRetention)));
    }

    #[test]
    fn single_partition_offsets_are_contiguous() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 100).unwrap();
        let offsets: Vec<u64> = (0..3).map(|i| b.append("t", format!("k{i}").as_bytes(), b"v").unwrap().1).collect();
        assert_eq!(offsets, [0, 1, 2]);
    }

    #[test]
    fn equal_keys_share_a_partition() {
        let b = Broker::in_memory();
        b.create_topic("t", 4, 100).unwrap();
        let (p1, _) = b.append("t", b"P1\x1fA1", b"a").unwrap();
        let (p2, _) = b.append("t", b"P1\x1fA1", b"b").unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1, partition_for(b"P1\x1fA1", 4));
    }

    #[test]
    fn retention_evicts_oldest() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 5).unwrap();
        for _ in 0..10 {
            b.append("t", b"k", b"v").unwrap();
        }
        assert_eq!(b.watermarks("t", 0).unwrap(), (5, 10));
    }

    #[test]
    fn poll_does_not_commit() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 100).unwrap();
        for _ in 0..3 {
            b.append("t", b"k", b"v").unwrap();
        }
        let first = b.poll("t", "g", 10, NO_WAIT).unwrap();
        let offsets: Vec<u64> = first.records.iter().map(|r| r.offset).collect();
        assert_eq!(offsets, [0, 1, 2]);
        assert_eq!(b.poll("t", "g", 10, NO_WAIT).unwrap(), first);
    }

    #[test]
    fn commit_moves_the_resume_point() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 100).unwrap();
        for _ in 0..5 {
            b.append("t", b"k", b"v").unwrap();
        }
        b.commit("g", "t", 0, 2).unwrap();
        assert_eq!(b.poll("t", "g", 10, NO_WAIT).unwrap().records[0].offset, 3);
        assert!(matches!(b.commit("g", "t", 0, 9), Err(BusError::OffsetBeyondHighWatermark { .. })));
        assert!(matches!(b.commit("g", "t", 0, 5), Err(BusError::OffsetBeyondHighWatermark { .. })));
    }

    #[test]
    fn evicted_commit_point_reports_gap() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 5).unwrap();
        b.append("t", b"k", b"v").unwrap();
        b.append("t", b"k", b"v").unwrap();
        b.append("t", b"k", b"v").unwrap();
        b.commit("g", "t", 0, 2).unwrap();
        for _ in 0..7 {
            b.append("t", b"k", b"v").unwrap();
        }
        assert_eq!(b.watermarks("t", 0).unwrap(), (5, 10));
        let res = b.poll("t", "g", 100, NO_WAIT).unwrap();
        assert_eq!(res.records[0].offset, 5);
        // offsets 3 and 4 were never delivered
        assert_eq!(res.gaps, 2);
    }

    #[test]
    fn groups_are_independent() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 100).unwrap();
        b.append("t", b"k", b"v").unwrap();
        b.append("t", b"k", b"v").unwrap();
        b.commit("a", "t", 0, 1).unwrap();
        assert!(b.poll("t", "a", 10, NO_WAIT).unwrap().records.is_empty());
        assert_eq!(b.poll("t", "b", 10, NO_WAIT).unwrap().records.len(), 2);
    }

    #[test]
    fn poll_waits_for_an_append() {
        let b = Arc::new(Broker::in_memory());
        b.create_topic("t", 2, 100).unwrap();
        let writer = {
            let b = Arc::clone(&b);
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_millis(50));
                b.append("t", b"late", b"v").unwrap();
            })
        };
        let res = b.poll("t", "g", 10, Duration::from_secs(5)).unwrap();
        writer.join().unwrap();
        assert_eq!(res.records.len(), 1);
    }

    #[test]
    fn stopped_broker_is_unavailable() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, 10).unwrap();
        b.shutdown();
        assert!(b.append("t", b"k", b"v").unwrap_err().is_transient());
        b.resume();
        assert!(b.append("t", b"k", b"v").is_ok());
    }

    #[test]
    fn disk_mode_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let durability = Durability::Disk { dir: dir.path().to_path_buf() };
        {
            let b = Broker::with_segment_records(durability.clone(), 3).unwrap();
            b.create_topic("adm", 2, 7).unwrap();
            for i in 0..20u32 {
                b.append("adm", &i.to_be_bytes(), format!("payload-{i}").as_bytes()).unwrap();
            }
            b.commit("engine", "adm", 0, b.watermarks("adm", 0).unwrap().1 - 2).unwrap();
        }
        let before: Vec<(u64, u64)> = {
            let b = Broker::with_segment_records(durability.clone(), 3).unwrap();
            (0..2).map(|p| b.watermarks("adm", p).unwrap()).collect()
        };
        let b = Broker::with_segment_records(durability, 3).unwrap();
        let after: Vec<(u64, u64)> = (0..2).map(|p| b.watermarks("adm", p).unwrap()).collect();
        assert_eq!(before, after);
        let high0 = after[0].1;
        assert_eq!(b.committed("engine", "adm", 0), Some(high0 - 2));
        let res = b.poll_partition("adm", "engine", 0, 10, NO_WAIT).unwrap();
        assert_eq!(res.records.len(), 1);
        assert_eq!(res.records[0].offset, high0 - 1);
        // retained window on disk matches memory semantics
        let all = b.poll_partition("adm", "fresh", 1, 100, NO_WAIT).unwrap();
        assert_eq!(all.records.len() as u64, after[1].1 - after[1].0);
        assert_eq!(all.records[0].offset, after[1].0);
    }

    proptest! {
        #[test]
        fn key_locality_and_per_partition_order(keys in prop::collection::vec(0u8..12, 1..200), parts in 1u32..6) {
            let b = Broker::in_memory();
            b.create_topic("t", parts, 10_000).unwrap();
            for (i, k) in keys.iter().enumerate() {
                b.append("t", &[*k], &(i as u64).to_be_bytes()).unwrap();
            }
            let recs = b.poll("t", "g", usize::MAX, NO_WAIT).unwrap().records;
            prop_assert_eq!(recs.len(), keys.len());
            let mut last_offset: HashMap<u32, u64> = HashMap::new();
            let mut last_seq: HashMap<Vec<u8>, u64> = HashMap::new();
            for r in &recs {
                if let Some(prev) = last_offset.insert(r.partition, r.offset) {
                    prop_assert_eq!(r.offset, prev + 1);
                }
                let seq = u64::from_be_bytes(r.payload.clone().try_into().unwrap());
                if let Some(prev) = last_seq.insert(r.key.clone(), seq) {
                    prop_assert!(seq > prev);
                }
                prop_assert_eq!(r.partition, partition_for(&r.key, parts));
            }
        }
    }
}
