use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sources::DataSource;
use super::store::{AppendOutcome, RecordStore};
use crate::base_lm::Tokenizer;
use crate::error::{Error, Result};

/// Stop collecting after this many consecutive source errors.
const MAX_CONSECUTIVE_ERRORS: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectReport {
    pub collected: usize,
    pub duplicates: usize,
    pub rejected_empty: usize,
    /// The store was (or became) full before `limit` was reached.
    pub at_cap: bool,
    pub errors: Vec<String>,
}

/// Appends up to `limit` new records from `source`, stopping early when the
/// source runs dry or the store fills up.
pub fn collect(store: &mut RecordStore, source: &mut dyn DataSource, limit: usize) -> CollectReport {
    let mut report = CollectReport::default();
    let mut consecutive_errors = 0;
    while report.collected < limit {
        if store.is_full() {
            report.at_cap = true;
            break;
        }
        let doc = match source.fetch_next() {
            Ok(Some(doc)) => doc,
            Ok(None) => break,
            Err(e) => {
                report.errors.push(e.to_string());
                consecutive_errors += 1;
                if consecutive_errors >= MAX_CONSECUTIVE_ERRORS || source.exhausted() {
                    break;
                }
                continue;
            }
        };
        consecutive_errors = 0;
        match store.append(&doc.source_uri, source.task_tag(), &doc.text) {
            Ok(AppendOutcome::Stored(_)) => report.collected += 1,
            Ok(AppendOutcome::Duplicate) => report.duplicates += 1,
            Ok(AppendOutcome::Empty) => report.rejected_empty += 1,
            Err(Error::StoreFull(_)) => {
                report.at_cap = true;
                break;
            }
            Err(e) => {
                report.errors.push(e.to_string());
                break;
            }
        }
    }
    report
}

/// Framed training windows for one task plus a held-out split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCorpus {
    pub tag: String,
    pub train: Vec<Vec<u32>>,
    pub heldout: Vec<Vec<u32>>,
    pub train_records: usize,
    pub heldout_records: usize,
    /// Cleaned text of the held-out records, in id order.
    pub heldout_texts: Vec<String>,
    /// Hex SHA-256 over every window.
    pub hash: String,
}

pub const MIN_TASK_RECORDS: usize = 10;

/// Tokenizes the records of `tag` with `id <= fence` into windows of at
/// most `seq_len` tokens. The last tenth of the records by id is held out.
pub fn build_task_corpus(store: &RecordStore, tag: &str, seq_len: usize, fence: Option<u64>) -> Result<TaskCorpus> {
    let records: Vec<_> = store.records_for(tag, fence).collect();
    if records.len() < MIN_TASK_RECORDS {
        return Err(Error::NotEnoughRecords {
            tag: tag.to_owned(),
            count: records.len(),
            required: MIN_TASK_RECORDS,
        });
    }
    if seq_len < 3 {
        return Err(Error::Config(format!("seq_len {seq_len} leaves no room for text")));
    }
    let tokenizer = Tokenizer::new(seq_len);
    let held = records.len() / 10;
    let split = records.len() - held;
    let windows = |rs: &[&super::store::Record]| -> Vec<Vec<u32>> {
        rs.iter().flat_map(|r| tokenizer.chunk(r.text.as_bytes())).collect()
    };
    let train = windows(&records[..split]);
    let heldout = windows(&records[split..]);

    let mut h = Sha256::new();
    for (part, seqs) in [(b'T', &train), (b'H', &heldout)] {
        h.update([part]);
        for s in seqs.iter() {
            h.update((s.len() as u32).to_le_bytes());
            for t in s {
                h.update(t.to_le_bytes());
            }
        }
    }
    Ok(TaskCorpus {
        tag: tag.to_owned(),
        train,
        heldout,
        train_records: split,
        heldout_records: held,
        heldout_texts: records[split..].iter().map(|r| r.text.clone()).collect(),
        hash: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Bleu,
    CodeAccuracy,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bleu => "bleu",
            Self::CodeAccuracy => "code_accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub tag: String,
    pub task_id: u32,
    pub column: usize,
    pub metric: MetricKind,
}

/// Task tags in registration order; ids are dense from 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRegistry {
    entries: Vec<TaskEntry>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, tag: &str) -> Option<&TaskEntry> {
        self.entries.iter().find(|e| e.tag == tag)
    }

    pub fn by_id(&self, task_id: u32) -> Option<&TaskEntry> {
        self.entries.get(task_id as usize)
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_id(&self) -> u32 {
        self.entries.len() as u32
    }

    pub fn register(&mut self, tag: &str, column: usize, metric: MetricKind) -> Result<u32> {
        if let Some(e) = self.get(tag) {
            return Err(Error::DuplicateTask(e.task_id));
        }
        let task_id = self.next_id();
        self.entries.push(TaskEntry {
            tag: tag.to_owned(),
            task_id,
            column,
            metric,
        });
        Ok(task_id)
    }
}
