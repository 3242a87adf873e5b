use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::clean::clean_text;
use crate::error::{Error, Result};

pub const DEFAULT_CAP: usize = 100_000;

/// One collected and cleaned text sample.
///
/// Field order is the on-disk key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: u64,
    pub source_uri: String,
    pub task_tag: String,
    pub text: String,
    /// RFC 3339, UTC.
    pub collected_at: String,
}

/// Source of collection timestamps.
pub trait Clock: Send {
    fn now(&mut self) -> DateTime<Utc>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&mut self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Starts at a fixed instant and advances by a fixed step per reading, so
/// stores written with it are reproducible.
#[derive(Clone, Copy, Debug)]
pub struct SteppedClock {
    next: DateTime<Utc>,
    step: Duration,
}

impl SteppedClock {
    pub fn new(start: DateTime<Utc>, step_secs: i64) -> Self {
        Self {
            next: start,
            step: Duration::seconds(step_secs),
        }
    }
}

impl Default for SteppedClock {
    fn default() -> Self {
        Self::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date"), 1)
    }
}

impl Clock for SteppedClock {
    fn now(&mut self) -> DateTime<Utc> {
        let t = self.next;
        self.next += self.step;
        t
    }
}

/// What happened to one offered text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppendOutcome {
    Stored(u64),
    /// Exact text already present.
    Duplicate,
    /// Nothing left after cleaning.
    Empty,
}

/// Append-only JSONL record file with a hard record cap.
pub struct RecordStore {
    path: PathBuf,
    cap: usize,
    records: Vec<Record>,
    texts: HashSet<String>,
    clock: Box<dyn Clock>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordStore")
            .field("path", &self.path)
            .field("cap", &self.cap)
            .field("count", &self.records.len())
            .finish()
    }
}

impl RecordStore {
    /// Starts an empty store, truncating any existing file.
    pub fn create(path: impl Into<PathBuf>, cap: usize, clock: Box<dyn Clock>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        File::create(&path)?;
        Ok(Self {
            path,
            cap,
            records: Vec::new(),
            texts: HashSet::new(),
            clock,
        })
    }

    /// Loads an existing store, or starts one if the file is missing.
    pub fn open(path: impl Into<PathBuf>, cap: usize, clock: Box<dyn Clock>) -> Result<Self> {
        let path = path.into();
        if !path.exists() {
            return Self::create(path, cap, clock);
        }
        let mut records = Vec::new();
        for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(r);
        }
        if records.len() > cap {
            return Err(Error::StoreFull(cap));
        }
        let texts = records.iter().map(|r| r.text.clone()).collect();
        Ok(Self {
            path,
            cap,
            records,
            texts,
            clock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn is_full(&self) -> bool {
        self.records.len() >= self.cap
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Highest id issued so far.
    pub fn last_id(&self) -> Option<u64> {
        self.records.last().map(|r| r.id)
    }

    /// Records of `tag` with `id <= fence` (all when `fence` is `None`), in
    /// id order.
    pub fn records_for<'a>(&'a self, tag: &'a str, fence: Option<u64>) -> impl Iterator<Item = &'a Record> {
        self.records
            .iter()
            .filter(move |r| r.task_tag == tag && fence.is_none_or(|f| r.id <= f))
    }

    /// Cleans `raw` and appends it as a new line. Refused once the cap is
    /// reached.
    pub fn append(&mut self, source_uri: &str, task_tag: &str, raw: &[u8]) -> Result<AppendOutcome> {
        if self.is_full() {
            return Err(Error::StoreFull(self.cap));
        }
        let cleaned = clean_text(raw);
        if cleaned.is_empty() {
            return Ok(AppendOutcome::Empty);
        }
        let text = String::from_utf8_lossy(&cleaned).into_owned();
        if self.texts.contains(&text) {
            return Ok(AppendOutcome::Duplicate);
        }
        let id = self.last_id().map_or(0, |i| i + 1);
        let record = Record {
            id,
            source_uri: source_uri.to_owned(),
            task_tag: task_tag.to_owned(),
            text,
            collected_at: self.clock.now().to_rfc3339_opts(SecondsFormat::Secs, true),
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        self.texts.insert(record.text.clone());
        self.records.push(record);
        Ok(AppendOutcome::Stored(id))
    }
}
