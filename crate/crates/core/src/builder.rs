//! Image builds with an ordered, replayable log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{now_millis, Millis};
use crate::runtime::{build_with_timeout, RuntimeDriver, RuntimeEndpoint, RuntimeError};

/// Most lines returned by one `tail_log` call.
pub const TAIL_BATCH_CAP: usize = 500;
/// Lines of log kept in a failure detail.
pub const FAILURE_TAIL_LINES: usize = 20;
pub const DEFAULT_LOG_RETENTION: Duration = Duration::from_secs(24 * 3600);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub index: u64,
    pub text: String,
    pub ts: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JobError {
    #[error("build job not found: {0}")]
    NotFound(String),
    #[error("build job already finished")]
    Finished,
}

#[derive(Debug)]
struct JobState {
    lines: Vec<LogLine>,
    status: BuildStatus,
    detail: Option<String>,
    finished_at: Option<Millis>,
}

/// One build: a single writer appends lines, then sets a terminal status once.
#[derive(Debug)]
pub struct BuildJob {
    pub id: String,
    pub session_id: String,
    pub tag: String,
    state: RwLock<JobState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogBatch {
    pub lines: Vec<LogLine>,
    pub next_index: u64,
    pub terminal: bool,
}

impl BuildJob {
    pub fn new(id: &str, session_id: &str, tag: &str) -> Self {
        BuildJob {
            id: id.to_string(),
            session_id: session_id.to_string(),
            tag: tag.to_string(),
            state: RwLock::new(JobState {
                lines: Vec::new(),
                status: BuildStatus::Running,
                detail: None,
                finished_at: None,
            }),
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, JobState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, JobState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends a line and returns its index.
    pub fn append(&self, text: impl Into<String>) -> Result<u64, JobError> {
        let mut st = self.write();
        if st.status != BuildStatus::Running {
            return Err(JobError::Finished);
        }
        let index = st.lines.len() as u64;
        st.lines.push(LogLine {
            index,
            text: text.into(),
            ts: now_millis(),
        });
        Ok(index)
    }

    pub fn finish(&self, status: BuildStatus, detail: Option<String>) -> Result<(), JobError> {
        assert_ne!(status, BuildStatus::Running, "terminal status required");
        let mut st = self.write();
        if st.status != BuildStatus::Running {
            return Err(JobError::Finished);
        }
        st.status = status;
        st.detail = detail;
        st.finished_at = Some(now_millis());
        Ok(())
    }

    pub fn status(&self) -> BuildStatus {
        self.read().status
    }

    pub fn detail(&self) -> Option<String> {
        self.read().detail.clone()
    }

    pub fn lines(&self) -> Vec<LogLine> {
        self.read().lines.clone()
    }

    pub fn len(&self) -> usize {
        self.read().lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tail(&self, from_index: u64) -> LogBatch {
        let st = self.read();
        let total = st.lines.len() as u64;
        let start = from_index.min(total) as usize;
        let end = (start + TAIL_BATCH_CAP).min(st.lines.len());
        let lines = st.lines[start..end].to_vec();
        let next_index = if lines.is_empty() { from_index.max(end as u64) } else { end as u64 };
        LogBatch {
            lines,
            next_index,
            terminal: st.status != BuildStatus::Running && next_index >= total,
        }
    }

    fn last_lines(&self, n: usize) -> Vec<String> {
        let st = self.read();
        let skip = st.lines.len().saturating_sub(n);
        st.lines[skip..].iter().map(|l| l.text.clone()).collect()
    }

    fn finished_at(&self) -> Option<Millis> {
        self.read().finished_at
    }
}

/// All build jobs the hub knows about, keyed by job id.
#[derive(Debug)]
pub struct BuildRegistry {
    jobs: RwLock<HashMap<String, Arc<BuildJob>>>,
    retention: Duration,
}

impl Default for BuildRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_LOG_RETENTION)
    }
}

impl BuildRegistry {
    pub fn new(retention: Duration) -> Self {
        BuildRegistry {
            jobs: RwLock::new(HashMap::new()),
            retention,
        }
    }

    pub fn create(&self, id: &str, session_id: &str, tag: &str) -> Arc<BuildJob> {
        let job = Arc::new(BuildJob::new(id, session_id, tag));
        self.jobs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.to_string(), job.clone());
        job
    }

    pub fn get(&self, id: &str) -> Option<Arc<BuildJob>> {
        self.jobs.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn tail_log(&self, job_id: &str, from_index: u64) -> Result<LogBatch, JobError> {
        self.get(job_id)
            .map(|j| j.tail(from_index))
            .ok_or_else(|| JobError::NotFound(job_id.to_string()))
    }

    /// Drops terminal jobs older than the retention window, except those in
    /// `keep` (jobs of live sessions). Returns how many were dropped.
    pub fn prune(&self, now: Millis, keep: &dyn Fn(&BuildJob) -> bool) -> usize {
        let cutoff = now - self.retention.as_millis() as Millis;
        let mut jobs = self.jobs.write().unwrap_or_else(|e| e.into_inner());
        let before = jobs.len();
        jobs.retain(|_, j| keep(j) || j.finished_at().is_none_or(|t| t > cutoff));
        before - jobs.len()
    }

    pub fn remove(&self, id: &str) {
        self.jobs.write().unwrap_or_else(|e| e.into_inner()).remove(id);
    }
}

/// Packs a checkout as an uncompressed tar with relative paths, leaving out
/// every `.git` directory.
pub fn archive_checkout(root: &Path) -> std::io::Result<Bytes> {
    let mut builder = tar::Builder::new(Vec::new());
    builder.follow_symlinks(false);
    builder.mode(tar::HeaderMode::Deterministic);
    let walker = walkdir::WalkDir::new(root)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !(e.file_type().is_dir() && e.file_name() == ".git"));
    for entry in walker {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(root).map_err(std::io::Error::other)?;
        builder.append_path_with_name(entry.path(), rel)?;
    }
    Ok(Bytes::from(builder.into_inner()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildFailureKind {
    Failed,
    Timeout,
    Unreachable,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{detail}")]
pub struct BuildFailure {
    pub kind: BuildFailureKind,
    /// Failure reason followed by the last log lines.
    pub detail: String,
}

/// Archives the checkout, streams it to the runtime, records every log line
/// in the job `job_id`, and sets its terminal status. Returns the tag.
#[allow(clippy::too_many_arguments)]
pub async fn run_build(
    registry: &BuildRegistry,
    driver: &dyn RuntimeDriver,
    job_id: &str,
    session_id: &str,
    checkout_root: &Path,
    endpoint: &RuntimeEndpoint,
    tag: &str,
    timeout: Duration,
) -> Result<String, BuildFailure> {
    let job = registry.create(job_id, session_id, tag);
    let root = checkout_root.to_path_buf();
    let context = match tokio::task::spawn_blocking(move || archive_checkout(&root)).await {
        Ok(Ok(bytes)) => bytes,
        Ok(Err(e)) => return Err(fail(&job, BuildFailureKind::Archive, format!("archive failed: {e}"))),
        Err(e) => return Err(fail(&job, BuildFailureKind::Archive, format!("archive task failed: {e}"))),
    };
    let sink_job = job.clone();
    let mut sink = move |line: String| {
        let _ = sink_job.append(line);
    };
    let result = build_with_timeout(driver, endpoint, context, tag, &mut sink, timeout).await;
    match result {
        Ok(()) => {
            let _ = job.finish(BuildStatus::Succeeded, None);
            Ok(tag.to_string())
        }
        Err(e) => {
            let kind = match e {
                RuntimeError::BuildTimeout(_) => BuildFailureKind::Timeout,
                RuntimeError::RuntimeUnreachable(_) => BuildFailureKind::Unreachable,
                _ => BuildFailureKind::Failed,
            };
            Err(fail(&job, kind, e.to_string()))
        }
    }
}

fn fail(job: &BuildJob, kind: BuildFailureKind, reason: String) -> BuildFailure {
    let tail = job.last_lines(FAILURE_TAIL_LINES);
    let detail = if tail.is_empty() {
        reason
    } else {
        format!("{reason}\n{}", tail.join("\n"))
    };
    let _ = job.finish(BuildStatus::Failed, Some(detail.clone()));
    BuildFailure { kind, detail }
}
