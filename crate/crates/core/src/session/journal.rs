use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::machine::{EventKind, IllegalTransition, Session, SessionEvent, SessionState};
use crate::clock::Millis;

/// A state-change record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub ts: Millis,
    pub session: String,
    pub event: EventKind,
    /// State after the event.
    pub state: SessionState,
    #[serde(default)]
    pub payload: Value,
}

/// A full copy of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub ts: Millis,
    pub session: String,
    pub snapshot: Session,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JournalRecord {
    Event(EventRecord),
    Snapshot(SnapshotRecord),
}

impl JournalRecord {
    pub fn session(&self) -> &str {
        match self {
            JournalRecord::Event(e) => &e.session,
            JournalRecord::Snapshot(s) => &s.session,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("journal records always serialize")
    }

    pub fn parse_line(line: &str) -> Result<JournalRecord, serde_json::Error> {
        serde_json::from_str(line)
    }
}

enum Sink {
    File { file: File, path: PathBuf },
    Memory(Vec<String>),
    Closed,
}

/// Append-only newline-delimited JSON log of session records.
pub struct Journal {
    sink: Mutex<Sink>,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        let kind = match &*sink {
            Sink::File { path, .. } => path.display().to_string(),
            Sink::Memory(l) => format!("memory ({} records)", l.len()),
            Sink::Closed => "closed".into(),
        };
        f.debug_struct("Journal").field("sink", &kind).finish()
    }
}

impl Journal {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: &Path) -> std::io::Result<Journal> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal {
            sink: Mutex::new(Sink::File {
                file,
                path: path.to_path_buf(),
            }),
        })
    }

    pub fn memory() -> Journal {
        Journal {
            sink: Mutex::new(Sink::Memory(Vec::new())),
        }
    }

    pub fn append(&self, record: &JournalRecord) {
        let mut line = record.to_line();
        line.push('\n');
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        match &mut *sink {
            Sink::File { file, path } => {
                if let Err(e) = file.write_all(line.as_bytes()) {
                    tracing::error!(path = %path.display(), error = %e, "journal append failed");
                }
            }
            Sink::Memory(lines) => lines.push(line.trim_end().to_string()),
            Sink::Closed => tracing::debug!(session = record.session(), "journal closed, record dropped"),
        }
    }

    pub fn append_event(&self, ts: Millis, session: &str, event: &SessionEvent, state: SessionState) {
        self.append(&JournalRecord::Event(EventRecord {
            ts,
            session: session.to_string(),
            event: event.kind(),
            state,
            payload: event.payload(),
        }));
    }

    pub fn append_snapshot(&self, ts: Millis, session: &Session) {
        self.append(&JournalRecord::Snapshot(SnapshotRecord {
            ts,
            session: session.id.clone(),
            snapshot: session.clone(),
        }));
    }

    /// Lines held by an in-memory journal.
    pub fn memory_lines(&self) -> Vec<String> {
        match &*self.sink.lock().unwrap_or_else(|e| e.into_inner()) {
            Sink::Memory(lines) => lines.clone(),
            _ => Vec::new(),
        }
    }

    pub fn sync(&self) -> std::io::Result<()> {
        match &mut *self.sink.lock().unwrap_or_else(|e| e.into_inner()) {
            Sink::File { file, .. } => {
                file.flush()?;
                file.sync_data()
            }
            _ => Ok(()),
        }
    }

    /// Flushes and stops accepting records.
    pub fn close(&self) -> std::io::Result<()> {
        let res = self.sync();
        *self.sink.lock().unwrap_or_else(|e| e.into_inner()) = Sink::Closed;
        res
    }
}

/// Reads every parseable record of a journal file. A missing file is an
/// empty journal; unparseable lines (such as a torn final write) are skipped.
pub fn load(path: &Path) -> std::io::Result<Vec<JournalRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match JournalRecord::parse_line(&line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!(path = %path.display(), line = n + 1, error = %e, "skipping journal line"),
        }
    }
    Ok(out)
}

/// Replaces the journal at `path` with `records`, atomically.
pub fn rewrite(path: &Path, records: &[JournalRecord]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    for r in records {
        writeln!(tmp, "{}", r.to_line())?;
    }
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayIssue {
    #[error("record {index}: event for unknown session `{session}`")]
    UnknownSession { index: usize, session: String },
    #[error("record {index}: {source}")]
    Illegal {
        index: usize,
        #[source]
        source: IllegalTransition,
    },
    #[error("record {index}: recorded state {recorded} but replay gives {replayed}")]
    StateMismatch {
        index: usize,
        recorded: SessionState,
        replayed: SessionState,
    },
    #[error("record {index}: bad payload: {detail}")]
    BadPayload { index: usize, detail: String },
}

/// Rebuilds sessions from snapshots and events. Records that cannot be
/// applied are reported and skipped.
pub fn replay(records: &[JournalRecord]) -> (BTreeMap<String, Session>, Vec<ReplayIssue>) {
    let mut sessions = BTreeMap::new();
    let mut issues = Vec::new();
    for (index, record) in records.iter().enumerate() {
        match record {
            JournalRecord::Snapshot(s) => {
                sessions.insert(s.session.clone(), s.snapshot.clone());
            }
            JournalRecord::Event(e) => {
                let Some(session) = sessions.get_mut(&e.session) else {
                    issues.push(ReplayIssue::UnknownSession {
                        index,
                        session: e.session.clone(),
                    });
                    continue;
                };
                let event = match SessionEvent::from_parts(e.event, e.payload.clone()) {
                    Ok(ev) => ev,
                    Err(err) => {
                        issues.push(ReplayIssue::BadPayload {
                            index,
                            detail: err.to_string(),
                        });
                        continue;
                    }
                };
                match session.apply_event(&event, e.ts) {
                    Ok(state) if state == e.state => {}
                    Ok(state) => issues.push(ReplayIssue::StateMismatch {
                        index,
                        recorded: e.state,
                        replayed: state,
                    }),
                    Err(source) => issues.push(ReplayIssue::Illegal { index, source }),
                }
            }
        }
    }
    (sessions, issues)
}
