//! Append-only segment files for one partition.
//!
//! Files are named by the offset of their first record (`{base:020}.seg`).
//! Each record is `u32 BE body length` followed by the body:
//! `u64 offset | i64 appended_at | u32 key length | key | payload`.
//! A torn record at the tail of the newest segment is truncated on recovery.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::LogRecord;
use crate::domain::Timestamp;

pub(super) struct SegmentLog {
    dir: PathBuf,
    segment_records: usize,
    /// (base offset, record count) of every live segment, oldest first.
    segments: Vec<(u64, usize)>,
    active: BufWriter<File>,
}

impl SegmentLog {
    /// Opens (or creates) the partition directory, returning the retained
    /// records and the high-watermark.
    pub(super) fn recover(dir: &Path, segment_records: usize) -> std::io::Result<(Self, Vec<LogRecord>, u64)> {
        fs::create_dir_all(dir)?;
        let mut bases: Vec<u64> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".seg")?.parse().ok()
            })
            .collect();
        bases.sort_unstable();
        if bases.is_empty() {
            File::create(seg_path(dir, 0))?;
            bases.push(0);
        }
        let mut records = Vec::new();
        let mut segments = Vec::new();
        let last = *bases.last().expect("non-empty");
        for base in &bases {
            let path = seg_path(dir, *base);
            let (recs, good_len) = read_segment(&path, partition_of(dir))?;
            if *base == last {
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(good_len)?;
            }
            segments.push((*base, recs.len()));
            records.extend(recs);
        }
        let high = records.last().map_or(last, |r| r.offset + 1).max(last);
        let mut file = OpenOptions::new().append(true).open(seg_path(dir, last))?;
        file.seek(SeekFrom::End(0))?;
        let log = SegmentLog { dir: dir.to_path_buf(), segment_records, segments, active: BufWriter::new(file) };
        Ok((log, records, high))
    }

    pub(super) fn append(&mut self, record: &LogRecord) -> std::io::Result<()> {
        let full = self.segments.last().is_some_and(|(_, n)| *n >= self.segment_records);
        if full {
            self.active.flush()?;
            let file = OpenOptions::new().create(true).append(true).open(seg_path(&self.dir, record.offset))?;
            self.active = BufWriter::new(file);
            self.segments.push((record.offset, 0));
        }
        let mut body = Vec::with_capacity(20 + record.key.len() + record.payload.len());
        body.extend_from_slice(&record.offset.to_be_bytes());
        body.extend_from_slice(&record.appended_at.0.to_be_bytes());
        body.extend_from_slice(&(record.key.len() as u32).to_be_bytes());
        body.extend_from_slice(&record.key);
        body.extend_from_slice(&record.payload);
        self.active.write_all(&(body.len() as u32).to_be_bytes())?;
        self.active.write_all(&body)?;
        self.active.flush()?;
        if let Some(last) = self.segments.last_mut() {
            last.1 += 1;
        }
        Ok(())
    }

    /// Deletes whole segments that hold only offsets below `low`.
    pub(super) fn evict_below(&mut self, low: u64) -> std::io::Result<()> {
        while self.segments.len() > 1 && self.segments[1].0 <= low {
            let (base, _) = self.segments.remove(0);
            fs::remove_file(seg_path(&self.dir, base))?;
        }
        Ok(())
    }
}

fn seg_path(dir: &Path, base: u64) -> PathBuf {
    dir.join(format!("{base:020}.seg"))
}

fn partition_of(dir: &Path) -> u32 {
    dir.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix('p'))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

fn read_segment(path: &Path, partition: u32) -> std::io::Result<(Vec<LogRecord>, u64)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut out = Vec::new();
    while pos + 4 <= bytes.len() {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + 4;
        if len < 20 || start + len > bytes.len() {
            break;
        }
        let body = &bytes[start..start + len];
        let offset = u64::from_be_bytes(body[0..8].try_into().expect("8 bytes"));
        let appended_at = i64::from_be_bytes(body[8..16].try_into().expect("8 bytes"));
        let key_len = u32::from_be_bytes(body[16..20].try_into().expect("4 bytes")) as usize;
        if 20 + key_len > body.len() {
            break;
        }
        out.push(LogRecord {
            partition,
            offset,
            key: body[20..20 + key_len].to_vec(),
            payload: body[20 + key_len..].to_vec(),
            appended_at: Timestamp(appended_at),
        });
        pos = start + len;
    }
    Ok((out, pos as u64))
}
