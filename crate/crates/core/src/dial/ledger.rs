//! Append-only event log. Every record carries the hash of its predecessor,
//! so truncation in the middle or edits to past records are detectable.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::JobSpec;
use crate::error::{Error, Result};

pub const LOG_FILE: &str = "corrections.log";
pub const GENESIS: &str = "genesis";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub correction_id: String,
    pub slide_id: String,
    /// The open iteration when the correction was made.
    pub iteration: u32,
    pub author: String,
    pub duration_minutes: f64,
    #[serde(default)]
    pub session_id: Option<String>,
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub labeled: u64,
    pub delta_sha256: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub annotator: String,
    pub slide_id: String,
    pub iteration: u32,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub duration_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Bootstrap {
        project_id: String,
        model_hash: String,
    },
    Correction(CorrectionRecord),
    Session(SessionRecord),
    IterationClosed {
        iteration: u32,
        job: JobSpec,
    },
    JobFailed {
        iteration: u32,
        detail: String,
    },
    ModelInstalled {
        iteration: u32,
        tag: String,
        hash: String,
        parent_hash: String,
    },
    Completed {
        iteration: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub prev: String,
    pub event: Event,
    pub hash: String,
}

pub fn record_hash(seq: u64, prev: &str, event: &Event) -> Result<String> {
    let mut h = Sha256::new();
    h.update(seq.to_le_bytes());
    h.update(prev.as_bytes());
    h.update(serde_json::to_vec(event)?);
    Ok(hex::encode(h.finalize()))
}

impl LogRecord {
    pub fn new(seq: u64, prev: &str, event: Event) -> Result<Self> {
        Ok(Self {
            seq,
            prev: prev.to_string(),
            hash: record_hash(seq, prev, &event)?,
            event,
        })
    }
}

/// Parsed log contents. `valid_len` is the byte length of the prefix made of
/// complete records; anything after it is a torn final write.
#[derive(Debug, Default)]
pub struct LogContents {
    pub records: Vec<LogRecord>,
    pub valid_len: u64,
    pub torn_tail: bool,
}

pub fn read_log(path: &Path) -> Result<LogContents> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LogContents::default()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = LogContents::default();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            out.torn_tail = true;
            break;
        };
        let line = &bytes[offset..offset + nl];
        match serde_json::from_slice::<LogRecord>(line) {
            Ok(r) => out.records.push(r),
            Err(e) if offset + nl + 1 == bytes.len() => {
                log::warn!("discarding unparsable final log line: {e}");
                out.torn_tail = true;
                break;
            }
            Err(e) => {
                return Err(Error::Format(format!(
                    "{}: record {} is corrupt: {e}",
                    path.display(),
                    out.records.len()
                )))
            }
        }
        offset += nl + 1;
        out.valid_len = offset as u64;
    }
    Ok(out)
}

/// Checks sequence numbers and the hash chain; returns the first problem.
pub fn check_chain(records: &[LogRecord]) -> std::result::Result<(), String> {
    let mut prev = GENESIS.to_string();
    for (i, r) in records.iter().enumerate() {
        if r.seq != i as u64 {
            return Err(format!("record {i} has sequence number {}", r.seq));
        }
        if r.prev != prev {
            return Err(format!("record {i} does not follow its predecessor"));
        }
        let expect = record_hash(r.seq, &r.prev, &r.event).map_err(|e| e.to_string())?;
        if expect != r.hash {
            return Err(format!("record {i} hash mismatch (content was altered)"));
        }
        prev = r.hash.clone();
    }
    Ok(())
}

pub fn append(path: &Path, record: &LogRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

pub fn truncate(path: &Path, len: u64) -> Result<()> {
    let f = File::options().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(len).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
