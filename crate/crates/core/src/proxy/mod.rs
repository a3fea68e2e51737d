//! Per-session reverse proxy: a disjoint prefix route table and the
//! forwarding path.

mod forward;

pub use forward::{AccessPolicy, ActivitySink, Proxy, ProxyConfig, HOP_BY_HOP_HEADERS};

use std::collections::BTreeMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROUTE_ROOT: &str = "/user/";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("invalid route path `{0}`")]
    Invalid(String),
    #[error("route `{new}` overlaps existing route `{existing}`")]
    Conflict { new: String, existing: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteTarget {
    /// `host:port` of the container.
    pub backend: String,
    pub session_id: String,
    /// Login of the session owner.
    pub owner: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub route_path: String,
    pub target: RouteTarget,
}

/// Route paths start with `/user/`, end with `/`, and no registered path
/// is a prefix of another.
#[derive(Debug, Default)]
pub struct RouteTable {
    entries: RwLock<BTreeMap<String, RouteTarget>>,
}

/// Checks the shape of a route key.
pub fn validate_route_path(path: &str) -> Result<(), RouteError> {
    let invalid = || RouteError::Invalid(path.to_string());
    let inner = path
        .strip_prefix(ROUTE_ROOT)
        .and_then(|p| p.strip_suffix('/'))
        .ok_or_else(invalid)?;
    if inner.is_empty() {
        return Err(invalid());
    }
    let segments_ok = inner
        .split('/')
        .all(|s| !s.is_empty() && s != "." && s != ".." && s.bytes().all(|b| b.is_ascii_graphic() && b != b'?' && b != b'#'));
    if segments_ok {
        Ok(())
    } else {
        Err(invalid())
    }
}

impl RouteTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, path: &str, target: RouteTarget) -> Result<(), RouteError> {
        validate_route_path(path)?;
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = entries
            .keys()
            .find(|k| k.starts_with(path) || path.starts_with(k.as_str()))
        {
            return Err(RouteError::Conflict {
                new: path.to_string(),
                existing: existing.clone(),
            });
        }
        entries.insert(path.to_string(), target);
        Ok(())
    }

    pub fn unregister(&self, path: &str) -> Option<RouteTarget> {
        self.entries.write().unwrap_or_else(|e| e.into_inner()).remove(path)
    }

    /// Removes every route of a session, returning their paths.
    pub fn unregister_session(&self, session_id: &str) -> Vec<String> {
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        let paths: Vec<String> = entries
            .iter()
            .filter(|(_, t)| t.session_id == session_id)
            .map(|(k, _)| k.clone())
            .collect();
        for p in &paths {
            entries.remove(p);
        }
        paths
    }

    /// Longest registered prefix of `request_path`.
    pub fn resolve(&self, request_path: &str) -> Option<Resolved> {
        let entries = self.entries.read().unwrap_or_else(|e| e.into_inner());
        let mut candidates: Vec<usize> = request_path.match_indices('/').map(|(i, _)| i + 1).collect();
        candidates.reverse();
        candidates.into_iter().find_map(|end| {
            let prefix = &request_path[..end];
            entries.get(prefix).map(|t| Resolved {
                route_path: prefix.to_string(),
                target: t.clone(),
            })
        })
    }

    pub fn snapshot(&self) -> BTreeMap<String, RouteTarget> {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
