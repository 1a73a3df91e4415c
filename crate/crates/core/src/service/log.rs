use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{fold_events, Event, EventKind, JointCase};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FsyncPolicy {
    /// `fsync` after every appended line.
    #[default]
    Always,
    /// Leave flushing to the operating system.
    Never,
}

/// Splits raw log bytes into complete lines. A trailing fragment without a
/// newline is a torn write and is reported by its byte offset.
fn complete_lines(bytes: &[u8]) -> (Vec<&[u8]>, usize) {
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let lines = bytes[..end]
        .split(|&b| b == b'\n')
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .collect();
    (lines, end)
}

fn parse_lines(path: &Path, lines: &[&[u8]]) -> Result<Vec<Event>> {
    let mut events = Vec::with_capacity(lines.len());
    let mut last = 0;
    for (i, line) in lines.iter().enumerate() {
        let e: Event = serde_json::from_slice(line)
            .map_err(|err| Error::Integrity(format!("{} line {}: {err}", path.display(), i + 1)))?;
        if e.seq <= last {
            return Err(Error::Integrity(format!(
                "{} line {}: seq {} does not follow {last}",
                path.display(),
                i + 1,
                e.seq
            )));
        }
        last = e.seq;
        events.push(e);
    }
    Ok(events)
}

/// Reads every committed event. A missing file is an empty log; a torn final
/// line is ignored.
pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let (lines, _) = complete_lines(&bytes);
    parse_lines(path, &lines)
}

/// Rebuilds case state by folding the log from the start.
pub fn replay_state(path: impl AsRef<Path>) -> Result<BTreeMap<String, JointCase>> {
    fold_events(&read_events(path)?)
}

/// Append-only JSONL event log. A line is committed once its newline is on
/// disk; each event goes out in a single write.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_seq: u64,
    fsync: FsyncPolicy,
}

impl EventLog {
    /// Opens or creates the log, truncating any torn tail, and returns the
    /// committed events.
    pub fn open(path: impl AsRef<Path>, fsync: FsyncPolicy) -> Result<(EventLog, Vec<Event>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let (lines, end) = complete_lines(&bytes);
        let events = parse_lines(&path, &lines)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if end < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - end, "truncating torn log tail");
            file.set_len(end as u64).map_err(|e| Error::io(&path, e))?;
        }
        let last_seq = events.last().map_or(0, |e| e.seq);
        Ok((
            EventLog {
                path,
                file,
                last_seq,
                fsync,
            },
            events,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// The event that would be written next, stamped now.
    pub fn next_event(&self, case_id: &str, kind: EventKind, payload: Value) -> Event {
        Event {
            seq: self.last_seq + 1,
            timestamp: Utc::now(),
            case_id: case_id.to_string(),
            kind,
            payload,
        }
    }

    /// Writes an event built by [`EventLog::next_event`].
    pub fn write(&mut self, event: &Event) -> Result<()> {
        if event.seq != self.last_seq + 1 {
            return Err(Error::Integrity(format!(
                "event seq {} does not follow {}",
                event.seq, self.last_seq
            )));
        }
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        if self.fsync == FsyncPolicy::Always {
            self.file.sync_data().map_err(|e| Error::io(&self.path, e))?;
        }
        self.last_seq = event.seq;
        Ok(())
    }

    /// Writes the next event and returns it with its assigned sequence number.
    pub fn append(&mut self, case_id: &str, kind: EventKind, payload: Value) -> Result<Event> {
        let event = self.next_event(case_id, kind, payload);
        self.write(&event)?;
        Ok(event)
    }
}
