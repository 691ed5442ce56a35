//! Append-only persistence journal with snapshot compaction.
//!
//! Every state transition of the key-management network is appended as one
//! JSON line and flushed, so a process restart can rebuild stores, open
//! sessions, and the single-use ledger without ever re-delivering a block.
//! `compact` rewrites the file as the minimal event sequence that
//! reconstructs the current state; consumed blocks survive as id+digest
//! tombstones so single-use stays auditable across restarts.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::KmsError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum JournalEvent {
    Push {
        scope: String,
        key_id: String,
        bytes: String,
        created_at: f64,
    },
    Reserve {
        scope: String,
        key_ids: Vec<String>,
    },
    Consume {
        scope: String,
        key_ids: Vec<String>,
    },
    Release {
        scope: String,
        key_ids: Vec<String>,
    },
    /// Consumed block retained as id + digest only.
    Tombstone {
        scope: String,
        key_id: String,
        digest: String,
    },
    /// Boundary split during a byte reservation.
    Split {
        scope: String,
        key_id: String,
        at: u64,
        tail_id: String,
    },
    Use {
        key_id: String,
        target: String,
    },
    SessionOpen {
        ksid: String,
        source: String,
        destination: String,
        chunk_size: u32,
        max_bps: u64,
        min_bps: u64,
        ttl: f64,
        backing_scope: String,
    },
    Assign {
        ksid: String,
        index: u64,
        key_ids: Vec<String>,
        chunk: String,
    },
    Deliver {
        ksid: String,
        index: u64,
        endpoint: u8,
    },
    SessionClose {
        ksid: String,
    },
    ExternalAdvance {
        id: String,
        counter: u64,
    },
    CountersSet {
        session: u64,
        relay: u64,
        combine: u64,
    },
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, KmsError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, event: &JournalEvent) -> Result<(), KmsError> {
        let line = serde_json::to_string(event).map_err(|e| KmsError::Wire(e.to_string()))?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Atomically replaces the journal content with the given events.
    pub fn rewrite(&mut self, events: &[JournalEvent]) -> Result<(), KmsError> {
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for event in events {
                let line =
                    serde_json::to_string(event).map_err(|e| KmsError::Wire(e.to_string()))?;
                f.write_all(line.as_bytes())?;
                f.write_all(b"\n")?;
            }
            f.sync_data()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }

    pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<JournalEvent>, KmsError> {
        let file = match File::open(path.as_ref()) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let reader = BufReader::new(file);
        let mut events = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: JournalEvent = serde_json::from_str(&line)
                .map_err(|e| KmsError::JournalCorrupt(format!("line {}: {e}", lineno + 1)))?;
            events.push(event);
        }
        Ok(events)
    }
}
