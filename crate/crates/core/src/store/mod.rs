//! Keyed persistence for risk profiles and physician feedback.
//!
//! A single-node log-structured store: every write appends one record to
//! the active segment file and updates an in-memory index; the index is
//! rebuilt by scanning segments on open. Values are sealed with AES-256-GCM
//! when a [`Sealer`] is configured.
//!
//! Two namespaces:
//! - `risk`: last-write-wins per admission, versioned. Rewriting a
//!   byte-identical profile is a no-op, so bus redelivery leaves no trace.
//! - `feedback`: append-only history per admission, newest last.
//!
//! Every effective write takes the next value of a global sequence number;
//! risk writes also land in the update feed read by the API.
//!
//! # On-disk layout
//!
//! `store-{n:08}.seg` files, replayed in order. Each record is a `u32 BE`
//! length followed by:
//!
//! ```text
//! u8 namespace (1 = risk, 2 = feedback) | u16 key length | key
//! | u64 version | u64 seq | i64 written_at | u8 sealed flag | value
//! ```
//!
//! where the value is either the [`SealedPayload`] bytes or plain JSON.

pub mod seal;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Notify;

use crate::domain::{AdmissionKey, Clock, Feedback, RiskProfile, SystemClock, Timestamp};
pub use seal::{Keyring, SealError, SealedPayload, Sealer};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("seal failure: {0}")]
    Seal(#[from] SealError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record in {file}: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("encoding error: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Risk,
    Feedback,
}

impl Namespace {
    fn tag(self) -> u8 {
        match self {
            Namespace::Risk => 1,
            Namespace::Feedback => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Namespace::Risk),
            2 => Some(Namespace::Feedback),
            _ => None,
        }
    }
}

type Ids = (String, String);

fn ids_of(key: &AdmissionKey) -> Ids {
    (key.patient_id.clone(), key.admission_id.clone())
}

/// A value as held at rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoredValue {
    Plain(Vec<u8>),
    Sealed(SealedPayload),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredEntry {
    pub namespace: Namespace,
    pub key: Vec<u8>,
    pub value: StoredValue,
    pub version: u64,
    pub seq: u64,
    pub written_at: Timestamp,
}

#[derive(Clone, Debug)]
struct RiskSlot {
    key: AdmissionKey,
    entry: StoredEntry,
    digest: [u8; 32],
    scored_at: Timestamp,
}

/// One score-change notification in the update feed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub seq: u64,
    pub patient_id: String,
    pub admission_id: String,
    pub scored_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecentEntry {
    pub key: AdmissionKey,
    pub scored_at: Timestamp,
    pub high_risk_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct StoreConfig {
    /// `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
    /// fsync after each write (disk mode).
    pub sync_writes: bool,
    /// Compact when dead bytes exceed this and half the log. 0 disables.
    pub compact_threshold_bytes: u64,
}

impl StoreConfig {
    pub fn memory() -> Self {
        StoreConfig::default()
    }

    pub fn disk(dir: impl Into<PathBuf>) -> Self {
        StoreConfig { dir: Some(dir.into()), sync_writes: false, compact_threshold_bytes: 64 * 1024 * 1024 }
    }
}

struct Segments {
    dir: PathBuf,
    number: u64,
    writer: BufWriter<File>,
    sync: bool,
}

#[derive(Default)]
struct Inner {
    risk: HashMap<Ids, RiskSlot>,
    recency: BTreeSet<(Timestamp, Ids)>,
    feedback: HashMap<Ids, Vec<StoredEntry>>,
    events: Vec<UpdateEvent>,
    seq: u64,
    live_bytes: u64,
    dead_bytes: u64,
    disk: Option<Segments>,
}

/// Thread-safe store handle: many readers, one logical writer per namespace.
pub struct Store {
    inner: RwLock<Inner>,
    sealer: Option<Sealer>,
    clock: Arc<dyn Clock>,
    notify: Arc<Notify>,
    compact_threshold: u64,
    unknown_feedback_keys: AtomicU64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("sealed", &self.sealer.is_some()).finish_non_exhaustive()
    }
}

impl Store {
    pub fn in_memory(sealer: Option<Sealer>) -> Self {
        Store::open(StoreConfig::memory(), sealer).expect("memory store cannot fail")
    }

    pub fn open(config: StoreConfig, sealer: Option<Sealer>) -> Result<Self> {
        Store::open_with_clock(config, sealer, Arc::new(SystemClock))
    }

    pub fn open_with_clock(config: StoreConfig, sealer: Option<Sealer>, clock: Arc<dyn Clock>) -> Result<Self> {
        let store = Store {
            inner: RwLock::new(Inner::default()),
            sealer,
            clock,
            notify: Arc::new(Notify::new()),
            compact_threshold: config.compact_threshold_bytes,
            unknown_feedback_keys: AtomicU64::new(0),
        };
        if let Some(dir) = &config.dir {
            fs::create_dir_all(dir)?;
            let numbers = segment_numbers(dir)?;
            {
                let mut inner = store.inner.write().expect("store lock");
                for n in &numbers {
                    store.replay_segment(&mut inner, &segment_path(dir, *n))?;
                }
                let number = numbers.last().copied().unwrap_or(1);
                let file = OpenOptions::new().create(true).append(true).open(segment_path(dir, number))?;
                inner.disk =
                    Some(Segments { dir: dir.clone(), number, writer: BufWriter::new(file), sync: config.sync_writes });
            }
        }
        Ok(store)
    }

    fn replay_segment(&self, inner: &mut Inner, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut good = 0usize;
        while pos + 4 <= bytes.len() {
            let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
            if pos + 4 + len > bytes.len() {
                break;
            }
            let record = &bytes[pos + 4..pos + 4 + len];
            let entry = decode_entry(record).map_err(|reason| StoreError::Corrupt {
                file: path.display().to_string(),
                reason: reason.to_string(),
            })?;
            self.apply(inner, entry, (len + 4) as u64)?;
            pos += 4 + len;
            good = pos;
        }
        if good < bytes.len() {
            // torn tail from a crash mid-write
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len(good as u64)?;
        }
        Ok(())
    }

    fn apply(&self, inner: &mut Inner, entry: StoredEntry, size: u64) -> Result<()> {
        inner.seq = inner.seq.max(entry.seq);
        let (pid, aid) = AdmissionKey::from_key_bytes(&entry.key).ok_or_else(|| StoreError::Corrupt {
            file: "<index>".into(),
            reason: "bad key bytes".into(),
        })?;
        let ids = (pid, aid);
        match entry.namespace {
            Namespace::Risk => {
                let plain = self.open_value(&entry.value)?;
                let profile: RiskProfile = serde_json::from_slice(&plain)?;
                let slot = RiskSlot {
                    key: profile.key.clone(),
                    digest: Sha256::digest(&plain).into(),
                    scored_at: profile.scored_at,
                    entry,
                };
                if let Some(old) = inner.risk.get(&ids) {
                    if old.entry.version >= slot.entry.version {
                        inner.dead_bytes += size;
                        return Ok(());
                    }
                    inner.recency.remove(&(old.scored_at, ids.clone()));
                    inner.dead_bytes += encoded_len(&old.entry);
                    inner.live_bytes -= encoded_len(&old.entry).min(inner.live_bytes);
                }
                inner.recency.insert((slot.scored_at, ids.clone()));
                inner.events.push(UpdateEvent {
                    seq: slot.entry.seq,
                    patient_id: ids.0.clone(),
                    admission_id: ids.1.clone(),
                    scored_at: slot.scored_at,
                });
                inner.live_bytes += size;
                inner.risk.insert(ids, slot);
            }
            Namespace::Feedback => {
                inner.live_bytes += size;
                inner.feedback.entry(ids).or_default().push(entry);
            }
        }
        Ok(())
    }

    fn seal_value(&self, plain: Vec<u8>) -> Result<StoredValue> {
        Ok(match &self.sealer {
            Some(s) => StoredValue::Sealed(s.seal(&plain)?),
            None => StoredValue::Plain(plain),
        })
    }

    fn open_value(&self, value: &StoredValue) -> Result<Vec<u8>> {
        match value {
            StoredValue::Plain(p) => Ok(p.clone()),
            StoredValue::Sealed(s) => match &self.sealer {
                Some(sealer) => Ok(sealer.open(s)?),
                None => Err(SealError::KeyNotConfigured(s.key_id.clone()).into()),
            },
        }
    }

    fn persist(&self, inner: &mut Inner, entry: &StoredEntry) -> Result<u64> {
        let bytes = encode_entry(entry);
        let size = bytes.len() as u64 + 4;
        if let Some(disk) = inner.disk.as_mut() {
            disk.writer.write_all(&(bytes.len() as u32).to_be_bytes())?;
            disk.writer.write_all(&bytes)?;
            disk.writer.flush()?;
            if disk.sync {
                disk.writer.get_ref().sync_data()?;
            }
        }
        Ok(size)
    }

    /// Stores a profile under `risk`. Returns the resulting version. Writes
    /// that are byte-identical to, or scored earlier than, the stored value
    /// are no-ops.
    pub fn put_profile(&self, profile: &RiskProfile) -> Result<u64> {
        let problems = profile.structural_problems();
        if !problems.is_empty() {
            return Err(StoreError::InvalidProfile(problems.join("; ")));
        }
        let plain = serde_json::to_vec(profile)?;
        let digest: [u8; 32] = Sha256::digest(&plain).into();
        let ids = ids_of(&profile.key);
        let version = {
            let mut inner = self.inner.write().expect("store lock");
            let version = match inner.risk.get(&ids) {
                Some(slot) if slot.digest == digest => return Ok(slot.entry.version),
                // a redelivered older score never replaces a newer one
                Some(slot) if profile.scored_at < slot.scored_at => return Ok(slot.entry.version),
                Some(slot) => slot.entry.version + 1,
                None => 1,
            };
            let entry = StoredEntry {
                namespace: Namespace::Risk,
                key: profile.key.key_bytes(),
                value: self.seal_value(plain.clone())?,
                version,
                seq: inner.seq + 1,
                written_at: self.clock.now(),
            };
            let size = self.persist(&mut inner, &entry)?;
            self.apply(&mut inner, entry, size)?;
            self.maybe_compact(&mut inner)?;
            version
        };
        self.notify.notify_waiters();
        Ok(version)
    }

    pub fn get_profile(&self, key: &AdmissionKey) -> Result<Option<RiskProfile>> {
        let inner = self.inner.read().expect("store lock");
        match inner.risk.get(&ids_of(key)) {
            None => Ok(None),
            Some(slot) => Ok(Some(serde_json::from_slice(&self.open_value(&slot.entry.value)?)?)),
        }
    }

    pub fn profile_version(&self, key: &AdmissionKey) -> Option<u64> {
        self.inner.read().expect("store lock").risk.get(&ids_of(key)).map(|s| s.entry.version)
    }

    /// Newest first, only entries scored strictly after `since`.
    pub fn list_recent(&self, limit: usize, since: Option<Timestamp>) -> Result<Vec<RecentEntry>> {
        let inner = self.inner.read().expect("store lock");
        let mut out = Vec::new();
        for (scored_at, ids) in inner.recency.iter().rev() {
            if out.len() >= limit || since.is_some_and(|s| *scored_at <= s) {
                break;
            }
            let slot = &inner.risk[ids];
            let profile: RiskProfile = serde_json::from_slice(&self.open_value(&slot.entry.value)?)?;
            out.push(RecentEntry {
                key: slot.key.clone(),
                scored_at: *scored_at,
                high_risk_count: profile.high_risk_count(),
            });
        }
        Ok(out)
    }

    /// Appends to the feedback history. A key that was never scored is still
    /// stored and counted in [`Store::unknown_feedback_keys`].
    pub fn put_feedback(&self, feedback: &Feedback) -> Result<u64> {
        let plain = serde_json::to_vec(feedback)?;
        let ids = ids_of(&feedback.key);
        let version = {
            let mut inner = self.inner.write().expect("store lock");
            if !inner.risk.contains_key(&ids) {
                self.unknown_feedback_keys.fetch_add(1, Ordering::Relaxed);
            }
            let version = inner.feedback.get(&ids).map_or(0, |v| v.len() as u64) + 1;
            let entry = StoredEntry {
                namespace: Namespace::Feedback,
                key: feedback.key.key_bytes(),
                value: self.seal_value(plain)?,
                version,
                seq: inner.seq + 1,
                written_at: self.clock.now(),
            };
            let size = self.persist(&mut inner, &entry)?;
            self.apply(&mut inner, entry, size)?;
            version
        };
        self.notify.notify_waiters();
        Ok(version)
    }

    pub fn get_feedback(&self, key: &AdmissionKey) -> Result<Vec<Feedback>> {
        let inner = self.inner.read().expect("store lock");
        let Some(entries) = inner.feedback.get(&ids_of(key)) else { return Ok(Vec::new()) };
        entries.iter().map(|e| Ok(serde_json::from_slice(&self.open_value(&e.value)?)?)).collect()
    }

    pub fn unknown_feedback_keys(&self) -> u64 {
        self.unknown_feedback_keys.load(Ordering::Relaxed)
    }

    /// Current global write sequence number (0 before the first write).
    pub fn current_seq(&self) -> u64 {
        self.inner.read().expect("store lock").seq
    }

    /// Score events with `seq > cursor`, oldest first, at most `limit`.
    pub fn updates_since(&self, cursor: u64, limit: usize) -> Vec<UpdateEvent> {
        let inner = self.inner.read().expect("store lock");
        let start = inner.events.partition_point(|e| e.seq <= cursor);
        inner.events[start..].iter().take(limit).cloned().collect()
    }

    /// Woken after every effective write.
    pub fn write_notifier(&self) -> Arc<Notify> {
        Arc::clone(&self.notify)
    }

    pub fn profile_count(&self) -> usize {
        self.inner.read().expect("store lock").risk.len()
    }

    /// Decrypted logical contents: namespace/key → (version, plaintext).
    /// Two stores with equal snapshots hold the same data regardless of
    /// nonces or write history.
    pub fn snapshot(&self) -> Result<BTreeMap<(Namespace, String, u64), Vec<u8>>> {
        let inner = self.inner.read().expect("store lock");
        let mut out = BTreeMap::new();
        for (ids, slot) in &inner.risk {
            out.insert(
                (Namespace::Risk, format!("{}/{}", ids.0, ids.1), slot.entry.version),
                self.open_value(&slot.entry.value)?,
            );
        }
        for (ids, entries) in &inner.feedback {
            for e in entries {
                out.insert((Namespace::Feedback, format!("{}/{}", ids.0, ids.1), e.version), self.open_value(&e.value)?);
            }
        }
        Ok(out)
    }

    fn maybe_compact(&self, inner: &mut Inner) -> Result<()> {
        if self.compact_threshold > 0
            && inner.disk.is_some()
            && inner.dead_bytes > self.compact_threshold
            && inner.dead_bytes > inner.live_bytes
        {
            compact_locked(inner)?;
        }
        Ok(())
    }

    /// Rewrites live entries into a fresh segment and deletes the old ones.
    pub fn compact(&self) -> Result<()> {
        let mut inner = self.inner.write().expect("store lock");
        if inner.disk.is_some() {
            compact_locked(&mut inner)?;
        }
        Ok(())
    }
}

fn compact_locked(inner: &mut Inner) -> Result<()> {
    let mut live: Vec<StoredEntry> = inner.risk.values().map(|s| s.entry.clone()).collect();
    live.extend(inner.feedback.values().flatten().cloned());
    live.sort_by_key(|e| e.seq);
    let disk = inner.disk.as_mut().expect("disk mode");
    disk.writer.flush()?;
    let next = disk.number + 1;
    let tmp = disk.dir.join(format!("store-{next:08}.seg.tmp"));
    let mut live_bytes = 0;
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for e in &live {
            let bytes = encode_entry(e);
            w.write_all(&(bytes.len() as u32).to_be_bytes())?;
            w.write_all(&bytes)?;
            live_bytes += bytes.len() as u64 + 4;
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    let final_path = segment_path(&disk.dir, next);
    fs::rename(&tmp, &final_path)?;
    for n in segment_numbers(&disk.dir)? {
        if n < next {
            fs::remove_file(segment_path(&disk.dir, n))?;
        }
    }
    disk.number = next;
    disk.writer = BufWriter::new(OpenOptions::new().append(true).open(&final_path)?);
    inner.live_bytes = live_bytes;
    inner.dead_bytes = 0;
    Ok(())
}

fn segment_path(dir: &Path, n: u64) -> PathBuf {
    dir.join(format!("store-{n:08}.seg"))
}

fn segment_numbers(dir: &Path) -> std::io::Result<Vec<u64>> {
    let mut out: Vec<u64> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("store-")?.strip_suffix(".seg")?.parse().ok()
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

fn encoded_len(entry: &StoredEntry) -> u64 {
    encode_entry(entry).len() as u64 + 4
}

fn encode_entry(entry: &StoredEntry) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + entry.key.len());
    out.push(entry.namespace.tag());
    out.extend_from_slice(&(entry.key.len() as u16).to_be_bytes());
    out.extend_from_slice(&entry.key);
    out.extend_from_slice(&entry.version.to_be_bytes());
    out.extend_from_slice(&entry.seq.to_be_bytes());
    out.extend_from_slice(&entry.written_at.0.to_be_bytes());
    match &entry.value {
        StoredValue::Plain(p) => {
            out.push(0);
            out.extend_from_slice(p);
        }
        StoredValue::Sealed(s) => {
            out.push(1);
            out.extend_from_slice(&s.to_bytes());
        }
    }
    out
}

fn decode_entry(bytes: &[u8]) -> std::result::Result<StoredEntry, &'static str> {
    let namespace = Namespace::from_tag(*bytes.first().ok_or("empty record")?).ok_or("unknown namespace")?;
    let key_len = u16::from_be_bytes(bytes.get(1..3).ok_or("short header")?.try_into().expect("2")) as usize;
    let key_end = 3 + key_len;
    let key = bytes.get(3..key_end).ok_or("short key")?.to_vec();
    let fixed = bytes.get(key_end..key_end + 25).ok_or("short header")?;
    let version = u64::from_be_bytes(fixed[0..8].try_into().expect("8"));
    let seq = u64::from_be_bytes(fixed[8..16].try_into().expect("8"));
    let written_at = Timestamp(i64::from_be_bytes(fixed[16..24].try_into().expect("8")));
    let rest = &bytes[key_end + 25..];
    let value = match fixed[24] {
        0 => StoredValue::Plain(rest.to_vec()),
        1 => StoredValue::Sealed(SealedPayload::from_bytes(rest).map_err(|_| "bad sealed payload")?),
        _ => return Err("unknown value flag"),
    };
    Ok(StoredEntry { namespace, key, value, version, seq, written_at })
}
