//! Repository intake: URL parsing, pinned checkouts, and layout inspection.

mod fetch;
mod manifest;
mod tag;

pub use fetch::{fetch_repository, Checkout, FetchError, Fetcher, GitFetcher, LocalFetcher, DEFAULT_FETCH_TIMEOUT};
pub use manifest::{inspect_manifest, RepoManifest};
pub use tag::{compute_image_tag, is_valid_image_tag};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default ref used when the URL does not select one.
pub const DEFAULT_REF: &str = "HEAD";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UrlError {
    #[error("malformed repository url: {0}")]
    MalformedUrl(String),
    #[error("unsupported scheme `{0}` (only https is accepted)")]
    UnsupportedScheme(String),
}

/// A normalized git repository reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoRef {
    pub host: String,
    pub owner: String,
    pub name: String,
    pub requested_ref: String,
    /// 40 lowercase hex characters once resolved, empty before.
    #[serde(default)]
    pub resolved_commit: String,
    pub canonical_url: String,
}

impl RepoRef {
    /// Builds a reference from already-validated components.
    pub fn new(host: &str, owner: &str, name: &str, requested_ref: &str) -> Result<Self, UrlError> {
        if !is_valid_segment(owner) || !is_valid_segment(name) {
            return Err(UrlError::MalformedUrl(format!("{host}/{owner}/{name}")));
        }
        if host.is_empty() {
            return Err(UrlError::MalformedUrl("missing host".into()));
        }
        Ok(RepoRef {
            host: host.to_string(),
            owner: owner.to_string(),
            name: name.to_string(),
            requested_ref: if requested_ref.is_empty() {
                DEFAULT_REF.to_string()
            } else {
                requested_ref.to_string()
            },
            resolved_commit: String::new(),
            canonical_url: canonical_url(host, owner, name),
        })
    }

    /// Returns a copy with a different requested ref.
    pub fn with_ref(mut self, requested_ref: &str) -> Self {
        if !requested_ref.is_empty() {
            self.requested_ref = requested_ref.to_string();
        }
        self
    }

    pub fn is_resolved(&self) -> bool {
        is_commit_hash(&self.resolved_commit)
    }

    /// `owner/name`, for display.
    pub fn slug(&self) -> String {
        format!("{}/{}", self.owner, self.name)
    }
}

pub fn canonical_url(host: &str, owner: &str, name: &str) -> String {
    format!("https://{host}/{owner}/{name}")
}

/// True for exactly 40 lowercase hex characters.
pub fn is_commit_hash(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn is_valid_segment(s: &str) -> bool {
    !s.is_empty() && !s.contains('/') && !s.chars().any(char::is_whitespace)
}

/// Parses `https://host/owner/name[.git][/][@ref | /tree/ref]`.
pub fn parse_repo_url(raw: &str) -> Result<RepoRef, UrlError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(UrlError::MalformedUrl("empty url".into()));
    }
    let parsed = url::Url::parse(raw).map_err(|e| UrlError::MalformedUrl(format!("{raw}: {e}")))?;
    if parsed.scheme() != "https" {
        return Err(UrlError::UnsupportedScheme(parsed.scheme().to_string()));
    }
    if !parsed.username().is_empty() || parsed.password().is_some() {
        return Err(UrlError::MalformedUrl("credentials are not accepted in repository urls".into()));
    }
    let host = match (parsed.host_str(), parsed.port()) {
        (Some(h), Some(p)) if !h.is_empty() => format!("{h}:{p}"),
        (Some(h), None) if !h.is_empty() => h.to_string(),
        _ => return Err(UrlError::MalformedUrl(format!("{raw}: missing host"))),
    };

    let mut segments: Vec<String> = parsed
        .path_segments()
        .map(|s| s.map(percent_decode).collect())
        .unwrap_or_default();
    while segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    let malformed = || UrlError::MalformedUrl(format!("{raw}: expected https://host/owner/name"));

    let mut requested_ref = String::new();
    if segments.len() > 3 && segments[2] == "tree" {
        requested_ref = segments[3..].join("/");
        segments.truncate(2);
    }
    if segments.len() != 2 {
        return Err(malformed());
    }
    let owner = segments[0].clone();
    let mut name = segments[1].clone();
    if let Some((n, r)) = name.split_once('@') {
        if r.is_empty() || !requested_ref.is_empty() {
            return Err(malformed());
        }
        requested_ref = r.to_string();
        name = n.to_string();
    }
    if let Some(stripped) = name.strip_suffix(".git") {
        name = stripped.to_string();
    }
    if requested_ref.chars().any(char::is_whitespace) {
        return Err(malformed());
    }
    RepoRef::new(&host, &owner, &name, &requested_ref).map_err(|_| malformed())
}

fn percent_decode(s: &str) -> String {
    percent_encoding::percent_decode_str(s).decode_utf8_lossy().into_owned()
}
