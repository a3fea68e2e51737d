use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Millis;
use crate::repo::RepoRef;
use crate::runtime::{ContainerHandle, ContainerStatus, RuntimeEndpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    Pending,
    Cloning,
    Building,
    Spawning,
    Running,
    Stopping,
    Stopped,
    Failed,
}

impl SessionState {
    pub const ALL: [SessionState; 8] = [
        SessionState::Pending,
        SessionState::Cloning,
        SessionState::Building,
        SessionState::Spawning,
        SessionState::Running,
        SessionState::Stopping,
        SessionState::Stopped,
        SessionState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Stopped | SessionState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Pending => "Pending",
            SessionState::Cloning => "Cloning",
            SessionState::Building => "Building",
            SessionState::Spawning => "Spawning",
            SessionState::Running => "Running",
            SessionState::Stopping => "Stopping",
            SessionState::Stopped => "Stopped",
            SessionState::Failed => "Failed",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Event names, without payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Begin,
    CloneOk,
    CloneErr,
    ManifestRejected,
    BuildOk,
    BuildErr,
    SpawnOk,
    SpawnErr,
    StopRequested,
    StopDone,
    IdleTimeout,
    RuntimeLost,
}

impl EventKind {
    pub const ALL: [EventKind; 12] = [
        EventKind::Begin,
        EventKind::CloneOk,
        EventKind::CloneErr,
        EventKind::ManifestRejected,
        EventKind::BuildOk,
        EventKind::BuildErr,
        EventKind::SpawnOk,
        EventKind::SpawnErr,
        EventKind::StopRequested,
        EventKind::StopDone,
        EventKind::IdleTimeout,
        EventKind::RuntimeLost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Begin => "Begin",
            EventKind::CloneOk => "CloneOk",
            EventKind::CloneErr => "CloneErr",
            EventKind::ManifestRejected => "ManifestRejected",
            EventKind::BuildOk => "BuildOk",
            EventKind::BuildErr => "BuildErr",
            EventKind::SpawnOk => "SpawnOk",
            EventKind::SpawnErr => "SpawnErr",
            EventKind::StopRequested => "StopRequested",
            EventKind::StopDone => "StopDone",
            EventKind::IdleTimeout => "IdleTimeout",
            EventKind::RuntimeLost => "RuntimeLost",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event `{s}`"))
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("illegal transition: {event} in state {state}")]
pub struct IllegalTransition {
    pub state: SessionState,
    pub event: EventKind,
}

/// The session lifecycle table. Terminal states accept nothing.
pub fn transition(state: SessionState, event: EventKind) -> Result<SessionState, IllegalTransition> {
    use EventKind as E;
    use SessionState as S;
    let next = match (state, event) {
        (S::Pending, E::Begin) => S::Cloning,
        (S::Cloning, E::CloneOk) => S::Building,
        (S::Cloning, E::CloneErr) => S::Failed,
        (S::Building, E::ManifestRejected) => S::Failed,
        (S::Building, E::BuildOk) => S::Spawning,
        (S::Building, E::BuildErr) => S::Failed,
        (S::Spawning, E::SpawnOk) => S::Running,
        (S::Spawning, E::SpawnErr) => S::Failed,
        (S::Running, E::IdleTimeout) => S::Stopping,
        (S::Running, E::RuntimeLost) => S::Failed,
        (S::Stopping, E::StopDone) => S::Stopped,
        (s, E::StopRequested) if !s.is_terminal() => S::Stopping,
        _ => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

/// An event together with its stage payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload")]
pub enum SessionEvent {
    Begin {},
    CloneOk { commit: String },
    CloneErr { detail: String },
    ManifestRejected { detail: String },
    BuildOk { image_tag: String },
    BuildErr { detail: String },
    SpawnOk { container: ContainerHandle },
    SpawnErr { detail: String },
    StopRequested { by: String },
    StopDone {},
    IdleTimeout { idle_ms: Millis },
    RuntimeLost { detail: String },
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            SessionEvent::Begin {} => EventKind::Begin,
            SessionEvent::CloneOk { .. } => EventKind::CloneOk,
            SessionEvent::CloneErr { .. } => EventKind::CloneErr,
            SessionEvent::ManifestRejected { .. } => EventKind::ManifestRejected,
            SessionEvent::BuildOk { .. } => EventKind::BuildOk,
            SessionEvent::BuildErr { .. } => EventKind::BuildErr,
            SessionEvent::SpawnOk { .. } => EventKind::SpawnOk,
            SessionEvent::SpawnErr { .. } => EventKind::SpawnErr,
            SessionEvent::StopRequested { .. } => EventKind::StopRequested,
            SessionEvent::StopDone {} => EventKind::StopDone,
            SessionEvent::IdleTimeout { .. } => EventKind::IdleTimeout,
            SessionEvent::RuntimeLost { .. } => EventKind::RuntimeLost,
        }
    }

    /// The payload object alone.
    pub fn payload(&self) -> Value {
        match serde_json::to_value(self) {
            Ok(Value::Object(mut m)) => m.remove("payload").unwrap_or(Value::Null),
            _ => Value::Null,
        }
    }

    pub fn from_parts(kind: EventKind, payload: Value) -> Result<SessionEvent, serde_json::Error> {
        let payload = if payload.is_null() {
            Value::Object(Default::default())
        } else {
            payload
        };
        serde_json::from_value(serde_json::json!({ "event": kind.as_str(), "payload": payload }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureStage {
    Clone,
    Manifest,
    Build,
    Spawn,
    Runtime,
}

impl FailureStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureStage::Clone => "clone",
            FailureStage::Manifest => "manifest",
            FailureStage::Build => "build",
            FailureStage::Spawn => "spawn",
            FailureStage::Runtime => "runtime",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: FailureStage,
    pub detail: String,
}

/// One launch of a repository by a user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub user_login: String,
    pub repo: RepoRef,
    pub state: SessionState,
    #[serde(default)]
    pub image_tag: String,
    #[serde(default)]
    pub container: Option<ContainerHandle>,
    pub route_path: String,
    /// Runtime the session builds and runs on.
    pub endpoint: RuntimeEndpoint,
    pub created_at: Millis,
    pub last_activity_at: Millis,
    #[serde(default)]
    pub failure: Option<Failure>,
    /// When the session reached a terminal state.
    #[serde(default)]
    pub ended_at: Option<Millis>,
}

pub fn route_path_for(login: &str, id: &str) -> String {
    format!("{}{login}/{id}/", crate::proxy::ROUTE_ROOT)
}

impl Session {
    pub fn new(id: &str, user_login: &str, repo: RepoRef, endpoint: RuntimeEndpoint, now: Millis) -> Self {
        Session {
            id: id.to_string(),
            user_login: user_login.to_string(),
            repo,
            state: SessionState::Pending,
            image_tag: String::new(),
            container: None,
            route_path: route_path_for(user_login, id),
            endpoint,
            created_at: now,
            last_activity_at: now,
            failure: None,
            ended_at: None,
        }
    }

    pub fn is_active(&self) -> bool {
        !self.state.is_terminal()
    }

    /// Applies `event` if the table allows it, updating the stage data
    /// carried by its payload. On error the session is unchanged.
    pub fn apply_event(&mut self, event: &SessionEvent, ts: Millis) -> Result<SessionState, IllegalTransition> {
        let next = transition(self.state, event.kind())?;
        let fail = |stage, detail: &String| {
            Some(Failure {
                stage,
                detail: detail.clone(),
            })
        };
        match event {
            SessionEvent::CloneOk { commit } => self.repo.resolved_commit = commit.clone(),
            SessionEvent::CloneErr { detail } => self.failure = fail(FailureStage::Clone, detail),
            SessionEvent::ManifestRejected { detail } => self.failure = fail(FailureStage::Manifest, detail),
            SessionEvent::BuildOk { image_tag } => self.image_tag = image_tag.clone(),
            SessionEvent::BuildErr { detail } => self.failure = fail(FailureStage::Build, detail),
            SessionEvent::SpawnOk { container } => self.container = Some(container.clone()),
            SessionEvent::SpawnErr { detail } => self.failure = fail(FailureStage::Spawn, detail),
            SessionEvent::RuntimeLost { detail } => {
                self.failure = fail(FailureStage::Runtime, detail);
                if let Some(c) = &mut self.container {
                    c.status = ContainerStatus::Missing;
                }
            }
            SessionEvent::StopDone {} => {
                if let Some(c) = &mut self.container {
                    c.status = ContainerStatus::Missing;
                }
            }
            SessionEvent::Begin {} | SessionEvent::StopRequested { .. } | SessionEvent::IdleTimeout { .. } => {}
        }
        self.state = next;
        if next.is_terminal() {
            self.ended_at = Some(ts);
        }
        Ok(next)
    }
}
