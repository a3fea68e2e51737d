use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{is_commit_hash, RepoRef};
use crate::clock::{now_millis, Millis};

pub const DEFAULT_FETCH_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("repository not found: {0}")]
    RepoNotFound(String),
    #[error("ref not found: {0}")]
    RefNotFound(String),
    #[error("fetch timed out after {0:?}")]
    FetchTimeout(Duration),
    #[error("repository requires authentication (private repositories are not supported): {0}")]
    AuthRequired(String),
    #[error("checkout is empty")]
    EmptyCheckout,
    #[error("fetch failed: {0}")]
    Io(String),
}

impl From<std::io::Error> for FetchError {
    fn from(e: std::io::Error) -> Self {
        FetchError::Io(e.to_string())
    }
}

/// A materialized, pinned working tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkout {
    pub repo: RepoRef,
    pub root_path: PathBuf,
    pub fetched_at: Millis,
}

/// Materializes `requested_ref` of `url` into `dest` (an existing empty
/// directory) and returns the resolved 40-hex commit.
pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str, requested_ref: &str, dest: &Path) -> Result<String, FetchError>;
}

/// Fetches into a fresh subdirectory of `workdir` and pins the commit.
pub fn fetch_repository(
    fetcher: &dyn Fetcher,
    repo: &RepoRef,
    workdir: &Path,
) -> Result<Checkout, FetchError> {
    let dir = tempfile::Builder::new()
        .prefix(&format!("{}-", repo.name))
        .tempdir_in(workdir)?
        .keep();
    match fetch_into(fetcher, repo, &dir) {
        Ok(checkout) => Ok(checkout),
        Err(e) => {
            let _ = std::fs::remove_dir_all(&dir);
            Err(e)
        }
    }
}

fn fetch_into(fetcher: &dyn Fetcher, repo: &RepoRef, dir: &Path) -> Result<Checkout, FetchError> {
    let commit = fetcher.fetch(&repo.canonical_url, &repo.requested_ref, dir)?;
    if !is_commit_hash(&commit) {
        return Err(FetchError::Io(format!("fetcher returned invalid commit `{commit}`")));
    }
    if !contains_file(dir) {
        return Err(FetchError::EmptyCheckout);
    }
    let mut pinned = repo.clone();
    pinned.resolved_commit = commit;
    Ok(Checkout {
        repo: pinned,
        root_path: dir.to_path_buf(),
        fetched_at: now_millis(),
    })
}

fn contains_file(dir: &Path) -> bool {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_entry(|e| e.file_name() != ".git")
        .filter_map(Result::ok)
        .any(|e| e.file_type().is_file())
}

/// Shells out to the `git` client: shallow fetch of one ref, then checkout.
#[derive(Debug, Clone)]
pub struct GitFetcher {
    pub git: PathBuf,
    pub timeout: Duration,
    /// URL prefix rewrites applied before fetching, like git's `insteadOf`.
    pub rewrites: Vec<(String, String)>,
}

impl Default for GitFetcher {
    fn default() -> Self {
        GitFetcher {
            git: PathBuf::from("git"),
            timeout: DEFAULT_FETCH_TIMEOUT,
            rewrites: Vec::new(),
        }
    }
}

impl GitFetcher {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_rewrite(mut self, prefix: impl Into<String>, replacement: impl Into<String>) -> Self {
        self.rewrites.push((prefix.into(), replacement.into()));
        self
    }

    fn rewrite(&self, url: &str) -> String {
        self.rewrites
            .iter()
            .filter(|(p, _)| url.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|(p, r)| format!("{r}{}", &url[p.len()..]))
            .unwrap_or_else(|| url.to_string())
    }

    fn run(&self, dir: &Path, args: &[&str], deadline: Instant) -> Result<String, FetchError> {
        let mut child = Command::new(&self.git)
            .args(args)
            .current_dir(dir)
            .env("GIT_TERMINAL_PROMPT", "0")
            .env("GIT_ASKPASS", "true")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(FetchError::FetchTimeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if status.success() {
            Ok(out)
        } else {
            Err(classify_git_error(&err))
        }
    }
}

fn classify_git_error(stderr: &str) -> FetchError {
    let lower = stderr.to_lowercase();
    let detail = stderr.trim().lines().last().unwrap_or("").to_string();
    if lower.contains("authentication failed")
        || lower.contains("could not read username")
        || lower.contains("terminal prompts disabled")
    {
        FetchError::AuthRequired(detail)
    } else if lower.contains("couldn't find remote ref")
        || lower.contains("not our ref")
        || lower.contains("unadvertised object")
        || lower.contains("no such remote ref")
    {
        FetchError::RefNotFound(detail)
    } else if lower.contains("not found")
        || lower.contains("does not appear to be a git repository")
        || lower.contains("does not exist")
    {
        FetchError::RepoNotFound(detail)
    } else {
        FetchError::Io(detail)
    }
}

impl Fetcher for GitFetcher {
    fn fetch(&self, url: &str, requested_ref: &str, dest: &Path) -> Result<String, FetchError> {
        let deadline = Instant::now() + self.timeout;
        let url = self.rewrite(url);
        self.run(dest, &["init", "--quiet", "."], deadline)?;
        self.run(
            dest,
            &["fetch", "--quiet", "--depth", "1", "--no-tags", &url, requested_ref],
            deadline,
        )?;
        self.run(dest, &["checkout", "--quiet", "--detach", "FETCH_HEAD"], deadline)?;
        let head = self.run(dest, &["rev-parse", "HEAD"], deadline)?;
        Ok(head.trim().to_string())
    }
}

/// Copies a local directory as the checkout. Maps each URL to a fixture
/// directory and a table of ref → commit.
#[derive(Debug, Clone, Default)]
pub struct LocalFetcher {
    repos: HashMap<String, (PathBuf, HashMap<String, String>)>,
}

impl LocalFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `dir` as the content of `url` with `HEAD` resolving to `commit`.
    pub fn with_repo(mut self, url: &str, dir: impl Into<PathBuf>, commit: &str) -> Self {
        let mut refs = HashMap::new();
        refs.insert("HEAD".to_string(), commit.to_string());
        refs.insert(commit.to_string(), commit.to_string());
        self.repos.insert(url.to_string(), (dir.into(), refs));
        self
    }

    pub fn with_ref(mut self, url: &str, name: &str, commit: &str) -> Self {
        if let Some((_, refs)) = self.repos.get_mut(url) {
            refs.insert(name.to_string(), commit.to_string());
            refs.insert(commit.to_string(), commit.to_string());
        }
        self
    }
}

impl Fetcher for LocalFetcher {
    fn fetch(&self, url: &str, requested_ref: &str, dest: &Path) -> Result<String, FetchError> {
        let (src, refs) = self
            .repos
            .get(url)
            .ok_or_else(|| FetchError::RepoNotFound(url.to_string()))?;
        let commit = refs
            .get(requested_ref)
            .ok_or_else(|| FetchError::RefNotFound(requested_ref.to_string()))?;
        copy_tree(src, dest)?;
        Ok(commit.clone())
    }
}

fn copy_tree(src: &Path, dest: &Path) -> std::io::Result<()> {
    for entry in walkdir::WalkDir::new(src).min_depth(1) {
        let entry = entry.map_err(std::io::Error::other)?;
        let rel = entry.path().strip_prefix(src).map_err(std::io::Error::other)?;
        let target = dest.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target)?;
        } else if entry.file_type().is_file() {
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}
