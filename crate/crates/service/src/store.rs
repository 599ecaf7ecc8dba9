//! Durable wrapper around the hub: a write-ahead log of commands, replayed
//! on open, and a periodic `.sprov` snapshot of the graph.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::Value as Json;
use sportprov::sprov::serialize;

use crate::error::ServiceError;
use crate::hub::{Command, Hub};

pub const WAL_FILE: &str = "wal.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.sprov";
const SNAPSHOT_EVERY: usize = 500;

#[derive(Debug)]
struct Log {
    dir: PathBuf,
    wal: File,
    since_snapshot: usize,
}

#[derive(Debug, Default)]
pub struct Service {
    hub: Hub,
    log: Option<Log>,
}

impl Service {
    /// Nothing is written anywhere.
    pub fn in_memory() -> Self {
        Service::default()
    }

    /// Open or create a data directory and replay its log.
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(WAL_FILE);
        let mut hub = Hub::new();
        let mut keep = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut lines = reader.lines().enumerate().peekable();
            while let Some((i, line)) = lines.next() {
                let line = line?;
                let last = lines.peek().is_none();
                let cmd: Command = match serde_json::from_str(&line) {
                    Ok(c) => c,
                    // a torn final write is dropped; anything else is damage
                    Err(_) if last => break,
                    Err(e) => return Err(ServiceError::Storage(format!("{WAL_FILE} line {}: {e}", i + 1))),
                };
                hub.apply(cmd).map_err(|e| ServiceError::Storage(format!("{WAL_FILE} line {} does not replay: {e}", i + 1)))?;
                keep += line.len() as u64 + 1;
            }
        }
        let wal = OpenOptions::new().create(true).append(true).open(&path)?;
        if wal.metadata()?.len() > keep {
            wal.set_len(keep)?;
        }
        Ok(Service { hub, log: Some(Log { dir: dir.to_path_buf(), wal, since_snapshot: 0 }) })
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    /// Apply `cmd` and log it once it has succeeded.
    pub fn apply(&mut self, cmd: Command) -> Result<Json, ServiceError> {
        let line = serde_json::to_string(&cmd).map_err(|e| ServiceError::Storage(e.to_string()))?;
        let out = self.hub.apply(cmd)?;
        if let Some(log) = &mut self.log {
            log.wal.write_all(line.as_bytes())?;
            log.wal.write_all(b"\n")?;
            log.wal.flush()?;
            log.since_snapshot += 1;
            if log.since_snapshot >= SNAPSHOT_EVERY {
                self.checkpoint()?;
            }
        }
        Ok(out)
    }

    /// Write the graph snapshot now.
    pub fn checkpoint(&mut self) -> Result<(), ServiceError> {
        let Some(log) = &mut self.log else { return Ok(()) };
        log.wal.sync_data()?;
        log.since_snapshot = 0;
        if self.hub.graph().is_empty() {
            return Ok(());
        }
        let text = serialize(self.hub.graph())?;
        let tmp = log.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, log.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }
}
