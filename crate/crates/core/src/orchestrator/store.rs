//! Append-only event log persistence.
//!
//! A data directory holds `meta.json` (the schema version) and
//! `events.jsonl`, one [`Event`] per line. Every append is flushed with
//! `fdatasync` before the operation that produced it returns. A torn final
//! line left by a crash mid-write is truncated on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::error::{OrchestratorError, Result};
use super::event::Event;

pub const SCHEMA_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const EVENTS_FILE: &str = "events.jsonl";

pub trait EventStore: Send {
    fn append(&mut self, event: &Event) -> io::Result<()>;
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
}

pub struct FileStore {
    file: File,
    path: PathBuf,
}

impl FileStore {
    /// Opens (creating if needed) the store under `dir` and returns it with
    /// the events already recorded.
    pub fn open(dir: &Path) -> Result<(FileStore, Vec<Event>)> {
        fs::create_dir_all(dir)?;
        let meta_path = dir.join(META_FILE);
        if meta_path.exists() {
            let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| {
                OrchestratorError::CorruptLog {
                    line: 0,
                    reason: format!("{META_FILE}: {e}"),
                }
            })?;
            if meta.schema_version != SCHEMA_VERSION {
                return Err(OrchestratorError::SchemaMismatch {
                    found: meta.schema_version,
                    expected: SCHEMA_VERSION,
                });
            }
        } else {
            let tmp = dir.join("meta.json.tmp");
            fs::write(
                &tmp,
                serde_json::to_vec(&Meta {
                    schema_version: SCHEMA_VERSION,
                })
                .expect("meta serializes"),
            )?;
            fs::rename(&tmp, &meta_path)?;
        }

        let path = dir.join(EVENTS_FILE);
        let mut events = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut lines = reader.split(b'\n').enumerate().peekable();
            while let Some((idx, line)) = lines.next() {
                let line = line?;
                let is_last = lines.peek().is_none();
                match serde_json::from_slice::<Event>(&line) {
                    Ok(ev) => {
                        events.push(ev);
                        good_len += line.len() as u64 + 1;
                    }
                    Err(_) if line.is_empty() => good_len += 1,
                    Err(e) if is_last => {
                        tracing::warn!(line = idx + 1, error = %e, "dropping torn final event");
                    }
                    Err(e) => {
                        return Err(OrchestratorError::CorruptLog {
                            line: idx + 1,
                            reason: e.to_string(),
                        })
                    }
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        if len > good_len {
            file.set_len(good_len)?;
        } else if len < good_len {
            // Last event is complete but lost its newline.
            file.write_all(b"\n")?;
        }
        Ok((FileStore { file, path }, events))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventStore for FileStore {
    fn append(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Keeps events in memory; the shared handle lets tests inspect the log.
#[derive(Clone, Default)]
pub struct MemoryStore {
    events: Arc<Mutex<Vec<Event>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }
}

impl EventStore for MemoryStore {
    fn append(&mut self, event: &Event) -> io::Result<()> {
        self.events.lock().unwrap().push(event.clone());
        Ok(())
    }
}
