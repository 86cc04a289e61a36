use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::domain::{AdmissionKey, Clock, Payload, Scalar, SourceKind, SourceRecord, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnType {
    /// `patient_id` / `admission_id`; lifted into the key.
    Key,
    /// `admitted_at`; lifted into the key.
    AdmittedAt,
    Text,
    Number,
    /// Timestamp kept in the payload as normalized ISO-8601 text.
    Time,
}

#[derive(Clone, Copy, Debug)]
pub struct Column {
    pub name: &'static str,
    pub ty: ColumnType,
    pub required: bool,
    /// Required column whose value may be the empty string.
    pub allow_empty: bool,
}

const fn col(name: &'static str, ty: ColumnType) -> Column {
    Column { name, ty, required: true, allow_empty: false }
}

const fn opt(name: &'static str, ty: ColumnType) -> Column {
    Column { name, ty, required: false, allow_empty: true }
}

pub const ADMISSION_COLUMNS: &[Column] = &[
    col("patient_id", ColumnType::Key),
    col("admission_id", ColumnType::Key),
    col("admitted_at", ColumnType::AdmittedAt),
    col("age_years", ColumnType::Number),
    col("sex", ColumnType::Text),
    opt("race", ColumnType::Text),
    opt("zip", ColumnType::Text),
    col("admission_type", ColumnType::Text),
    col("surgery_code", ColumnType::Text),
    Column { name: "comorbidity_flags", ty: ColumnType::Text, required: true, allow_empty: true },
];

pub const PROVIDER_COLUMNS: &[Column] = &[
    col("patient_id", ColumnType::Key),
    col("admission_id", ColumnType::Key),
    col("provider_id", ColumnType::Text),
    col("provider_role", ColumnType::Text),
];

pub const LAB_COLUMNS: &[Column] = &[
    col("patient_id", ColumnType::Key),
    col("admission_id", ColumnType::Key),
    col("lab_name", ColumnType::Text),
    col("lab_value", ColumnType::Number),
    opt("lab_units", ColumnType::Text),
    col("taken_at", ColumnType::Time),
];

pub const MEDICATION_COLUMNS: &[Column] = &[
    col("patient_id", ColumnType::Key),
    col("admission_id", ColumnType::Key),
    col("drug_name", ColumnType::Text),
    opt("dose", ColumnType::Text),
    opt("route", ColumnType::Text),
    col("given_at", ColumnType::Time),
];

pub fn columns_for(kind: SourceKind) -> &'static [Column] {
    match kind {
        SourceKind::Admission => ADMISSION_COLUMNS,
        SourceKind::Provider => PROVIDER_COLUMNS,
        SourceKind::Lab => LAB_COLUMNS,
        SourceKind::Medication => MEDICATION_COLUMNS,
    }
}

/// Parses one CSV source. Malformed rows are skipped and counted.
pub fn parse_csv(kind: SourceKind, input: impl Read, observed_at: Timestamp) -> (Vec<SourceRecord>, usize) {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(_) => return (Vec::new(), 0),
    };
    let columns = columns_for(kind);
    let header_index: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let header_ok = columns.iter().filter(|c| c.required).all(|c| header_index.contains_key(c.name));
    let mut records = Vec::new();
    let mut malformed = 0;
    for row in reader.records() {
        let Ok(row) = row else {
            malformed += 1;
            continue;
        };
        if !header_ok {
            malformed += 1;
            continue;
        }
        match parse_row(kind, columns, &headers, &row, observed_at) {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    (records, malformed)
}

fn parse_row(
    kind: SourceKind,
    columns: &[Column],
    headers: &csv::StringRecord,
    row: &csv::StringRecord,
    observed_at: Timestamp,
) -> Option<SourceRecord> {
    let mut patient_id = None;
    let mut admission_id = None;
    let mut admitted_at = Timestamp::EPOCH;
    let mut payload = Payload::new();
    for (i, name) in headers.iter().enumerate() {
        let raw = row.get(i).unwrap_or("");
        let Some(column) = columns.iter().find(|c| c.name == name) else {
            payload.insert(name.to_string(), if raw.is_empty() { Scalar::Null } else { Scalar::Text(raw.to_string()) });
            continue;
        };
        if raw.is_empty() {
            if column.required && !column.allow_empty {
                return None;
            }
            if column.allow_empty && column.required {
                payload.insert(name.to_string(), Scalar::Text(String::new()));
            } else {
                payload.insert(name.to_string(), Scalar::Null);
            }
            continue;
        }
        match column.ty {
            ColumnType::Key if name == "patient_id" => patient_id = Some(raw.to_string()),
            ColumnType::Key => admission_id = Some(raw.to_string()),
            ColumnType::AdmittedAt => admitted_at = Timestamp::parse_iso(raw).ok()?,
            ColumnType::Text => {
                payload.insert(name.to_string(), Scalar::Text(raw.to_string()));
            }
            ColumnType::Number => {
                let v: f64 = raw.parse().ok()?;
                if !v.is_finite() {
                    return None;
                }
                payload.insert(name.to_string(), Scalar::Number(v));
            }
            ColumnType::Time => {
                let t = Timestamp::parse_iso(raw).ok()?;
                payload.insert(name.to_string(), Scalar::Text(t.to_iso()));
            }
        }
    }
    for c in columns.iter().filter(|c| !c.required) {
        payload.entry(c.name.to_string()).or_insert(Scalar::Null);
    }
    Some(SourceRecord { kind, key: AdmissionKey::new(patient_id?, admission_id?, admitted_at), payload, observed_at })
}

/// Directories scanned each interval.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SourceConfig {
    pub dirs: Vec<PathBuf>,
}

/// Files already ingested; optionally persisted as JSON.
#[derive(Debug, Default)]
pub struct SeenFileLedger {
    seen: BTreeSet<PathBuf>,
    path: Option<PathBuf>,
}

impl SeenFileLedger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn load(path: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let path = path.into();
        let seen = if path.exists() {
            let bytes = fs::read(&path).map_err(|e| IngestError::Ledger(format!("{}: {e}", path.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| IngestError::Ledger(format!("{}: {e}", path.display())))?
        } else {
            BTreeSet::new()
        };
        Ok(SeenFileLedger { seen, path: Some(path) })
    }

    pub fn contains(&self, path: &Path) -> bool {
        self.seen.contains(path)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    fn commit(&mut self, files: impl IntoIterator<Item = PathBuf>) -> Result<(), IngestError> {
        let mut next = self.seen.clone();
        next.extend(files);
        if let Some(path) = &self.path {
            let tmp = path.with_extension("tmp");
            let bytes = serde_json::to_vec_pretty(&next).expect("paths serialize");
            fs::write(&tmp, bytes)
                .and_then(|_| fs::rename(&tmp, path))
                .map_err(|e| IngestError::Ledger(format!("{}: {e}", path.display())))?;
        }
        self.seen = next;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceBatch {
    pub interval_id: u64,
    pub records: BTreeMap<SourceKind, Vec<SourceRecord>>,
    pub discovered_files: Vec<(PathBuf, u64)>,
    pub malformed_rows: usize,
}

impl SourceBatch {
    pub fn new(interval_id: u64) -> Self {
        SourceBatch { interval_id, ..Default::default() }
    }

    pub fn push(&mut self, record: SourceRecord) {
        self.records.entry(record.kind).or_default().push(record);
    }

    pub fn count(&self, kind: SourceKind) -> usize {
        self.records.get(&kind).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn into_records(self) -> impl Iterator<Item = SourceRecord> {
        self.records.into_values().flatten()
    }
}

fn kind_of(path: &Path) -> Option<SourceKind> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".csv")?;
    let (prefix, _) = stem.split_once('_')?;
    SourceKind::from_file_prefix(prefix)
}

/// Reads every not-yet-seen source file. The ledger is updated only if the
/// whole scan succeeds, together with the returned batch.
pub fn scan_sources(
    config: &SourceConfig,
    ledger: &mut SeenFileLedger,
    interval_id: u64,
    observed_at: Timestamp,
) -> Result<SourceBatch, IngestError> {
    let mut files = Vec::new();
    for dir in &config.dirs {
        let entries =
            fs::read_dir(dir).map_err(|source| IngestError::Config { dir: dir.display().to_string(), source })?;
        for entry in entries {
            let entry = entry.map_err(|source| IngestError::Config { dir: dir.display().to_string(), source })?;
            let path = entry.path();
            if path.is_file() && !ledger.contains(&path) {
                if let Some(kind) = kind_of(&path) {
                    files.push((path, kind));
                }
            }
        }
    }
    files.sort();
    let mut batch = SourceBatch::new(interval_id);
    for (path, kind) in &files {
        let bytes = fs::read(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
        let (records, malformed) = parse_csv(*kind, &bytes[..], observed_at);
        batch.malformed_rows += malformed;
        for r in records {
            batch.push(r);
        }
        batch.discovered_files.push((path.clone(), bytes.len() as u64));
    }
    ledger.commit(files.into_iter().map(|(p, _)| p))?;
    Ok(batch)
}

/// Stateful wrapper: owns the ledger and the interval counter.
pub struct Scanner {
    config: SourceConfig,
    ledger: SeenFileLedger,
    next_interval: u64,
    clock: Arc<dyn Clock>,
}

impl Scanner {
    pub fn new(config: SourceConfig, ledger: SeenFileLedger, clock: Arc<dyn Clock>) -> Self {
        Scanner { config, ledger, next_interval: 1, clock }
    }

    pub fn scan(&mut self) -> Result<SourceBatch, IngestError> {
        let id = self.next_interval;
        let batch = scan_sources(&self.config, &mut self.ledger, id, self.clock.now())?;
        self.next_interval += 1;
        Ok(batch)
    }

    pub fn ledger(&self) -> &SeenFileLedger {
        &self.ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ADM_HEADER: &str = "patient_id,admission_id,admitted_at,age_years,sex,race,zip,admission_type,surgery_code,comorbidity_flags\n";

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn empty_directories_give_empty_batch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SourceConfig { dirs: vec![dir.path().into()] };
        let batch = scan_sources(&cfg, &mut SeenFileLedger::in_memory(), 1, Timestamp(0)).unwrap();
        assert_eq!(batch.total(), 0);
        assert!(batch.discovered_files.is_empty());
    }

    #[test]
    fn counts_preserved_and_no_reread() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "admissions_1.csv",
            &format!(
                "{ADM_HEADER}P1,A1,2005-01-01T08:00:00Z,54,F,white,32601,elective,CARD,CHF;DM\nP2,A2,2005-01-02T08:00:00Z,61,M,,,emergency,GEN,\n"
            ),
        );
        write(dir.path(), "providers_1.csv", "patient_id,admission_id,provider_id,provider_role\nP1,A1,D1,surgeon\nP2,A2,D2,anesthesia\n");
        write(dir.path(), "notes.txt", "ignored");
        let cfg = SourceConfig { dirs: vec![dir.path().into()] };
        let mut ledger = SeenFileLedger::in_memory();
        let batch = scan_sources(&cfg, &mut ledger, 1, Timestamp(7)).unwrap();
        assert_eq!(batch.count(SourceKind::Admission), 2);
        assert_eq!(batch.count(SourceKind::Provider), 2);
        assert_eq!(batch.discovered_files.len(), 2);
        let p2 = &batch.records[&SourceKind::Admission][1];
        assert_eq!(p2.payload["race"], Scalar::Null);
        assert_eq!(p2.payload["comorbidity_flags"], Scalar::Text(String::new()));
        assert_eq!(p2.payload["age_years"], Scalar::Number(61.0));
        assert_eq!(p2.key.admitted_at, Timestamp::parse_iso("2005-01-02T08:00:00Z").unwrap());
        let again = scan_sources(&cfg, &mut ledger, 2, Timestamp(8)).unwrap();
        assert_eq!(again.total(), 0);
    }

    #[test]
    fn malformed_rows_are_skipped_and_file_marked_seen() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "labs_x.csv",
            "patient_id,admission_id,lab_name,lab_value,lab_units,taken_at\n\
             P1,A1,creatinine,1.1,mg/dL,2005-01-01T09:00:00Z\n\
             P1,A1,creatinine,not-a-number,mg/dL,2005-01-01T09:00:00Z\n\
             ,A1,creatinine,1.0,mg/dL,2005-01-01T09:00:00Z\n\
             P1,A1,creatinine,1.3,,2005-01-01T10:00:00Z\n",
        );
        let cfg = SourceConfig { dirs: vec![dir.path().into()] };
        let mut ledger = SeenFileLedger::in_memory();
        let batch = scan_sources(&cfg, &mut ledger, 1, Timestamp(0)).unwrap();
        assert_eq!(batch.count(SourceKind::Lab), 2);
        assert_eq!(batch.malformed_rows, 2);
        assert_eq!(batch.records[&SourceKind::Lab][1].payload["lab_units"], Scalar::Null);
        assert_eq!(ledger.len(), 1);
    }

    #[test]
    fn missing_required_header_rejects_all_rows() {
        let (records, malformed) =
            parse_csv(SourceKind::Provider, "patient_id,admission_id,provider_id\nP,A,D\nP,B,E\n".as_bytes(), Timestamp(0));
        assert!(records.is_empty());
        assert_eq!(malformed, 2);
    }

    #[test]
    fn unreadable_directory_is_a_config_error() {
        let cfg = SourceConfig { dirs: vec!["/definitely/not/here".into()] };
        let err = scan_sources(&cfg, &mut SeenFileLedger::in_memory(), 1, Timestamp(0)).unwrap_err();
        assert!(matches!(err, IngestError::Config { .. }));
    }

    #[test]
    fn persisted_ledger_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir(&src).unwrap();
        write(&src, "providers_a.csv", "patient_id,admission_id,provider_id,provider_role\nP,A,D,surgeon\n");
        let cfg = SourceConfig { dirs: vec![src] };
        let ledger_path = dir.path().join("seen.json");
        let mut ledger = SeenFileLedger::load(&ledger_path).unwrap();
        assert_eq!(scan_sources(&cfg, &mut ledger, 1, Timestamp(0)).unwrap().total(), 1);
        let mut reloaded = SeenFileLedger::load(&ledger_path).unwrap();
        assert_eq!(scan_sources(&cfg, &mut reloaded, 2, Timestamp(0)).unwrap().total(), 0);
    }

    #[test]
    fn file_kind_from_name() {
        assert_eq!(kind_of(Path::new("/x/labs_2024.csv")), Some(SourceKind::Lab));
        assert_eq!(kind_of(Path::new("/x/medications_a_b.csv")), Some(SourceKind::Medication));
        assert_eq!(kind_of(Path::new("/x/labs.csv")), None);
        assert_eq!(kind_of(Path::new("/x/vitals_1.csv")), None);
    }
}
