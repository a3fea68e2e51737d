//! Container runtime driver contract.
//!
//! Every operation names the endpoint it talks to, so a user-supplied
//! endpoint is just another [`RuntimeEndpoint`] value handed to the same
//! driver. [`docker::DockerDriver`] speaks the Docker Engine API;
//! [`sim::SimRuntime`] is an in-memory runtime with scripting and failure
//! injection.

pub mod docker;
pub mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label carried by every container the hub starts.
pub const SESSION_LABEL: &str = "everhub.session";
pub const USER_LABEL: &str = "everhub.user";

pub const DEFAULT_MEMORY_LIMIT_BYTES: u64 = 1 << 30;
pub const DEFAULT_CPU_MILLICORES: u64 = 1000;
pub const DEFAULT_BUILD_TIMEOUT: Duration = Duration::from_secs(900);
pub const DEFAULT_DOCKER_SOCKET: &str = "/var/run/docker.sock";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("build failed: {0}")]
    BuildFailed(String),
    #[error("build timed out after {0:?}")]
    BuildTimeout(Duration),
    #[error("runtime unreachable: {0}")]
    RuntimeUnreachable(String),
    #[error("image missing: {0}")]
    ImageMissing(String),
    #[error("container failed to start: {0}")]
    StartFailed(String),
    #[error("invalid container spec: {0}")]
    InvalidSpec(String),
    #[error("unexpected runtime response: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid runtime address `{0}`")]
pub struct AddressError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RuntimeAddress {
    Unix(PathBuf),
    Tcp { host: String, port: u16 },
}

impl FromStr for RuntimeAddress {
    type Err = AddressError;

    /// Accepts `unix:///path`, `/path`, `tcp://host:port` and `host:port`.
    fn from_str(raw: &str) -> Result<Self, Self::Err> {
        let err = || AddressError(raw.to_string());
        let raw_trimmed = raw.trim();
        if let Some(path) = raw_trimmed.strip_prefix("unix://") {
            if !path.starts_with('/') || path.len() < 2 || path.contains('\0') {
                return Err(err());
            }
            return Ok(RuntimeAddress::Unix(PathBuf::from(path)));
        }
        if raw_trimmed.starts_with('/') {
            if raw_trimmed.len() < 2 || raw_trimmed.contains('\0') {
                return Err(err());
            }
            return Ok(RuntimeAddress::Unix(PathBuf::from(raw_trimmed)));
        }
        let hostport = raw_trimmed.strip_prefix("tcp://").unwrap_or(raw_trimmed);
        let (host, port) = hostport.rsplit_once(':').ok_or_else(err)?;
        let port: u16 = port.parse().map_err(|_| err())?;
        let host = host.trim_start_matches('[').trim_end_matches(']');
        let host_ok = !host.is_empty()
            && host
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | ':' | '_'));
        if !host_ok || port == 0 {
            return Err(err());
        }
        Ok(RuntimeAddress::Tcp {
            host: host.to_string(),
            port,
        })
    }
}

impl fmt::Display for RuntimeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuntimeAddress::Unix(p) => write!(f, "unix://{}", p.display()),
            RuntimeAddress::Tcp { host, port } if host.contains(':') => write!(f, "tcp://[{host}]:{port}"),
            RuntimeAddress::Tcp { host, port } => write!(f, "tcp://{host}:{port}"),
        }
    }
}

impl Serialize for RuntimeAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RuntimeAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Address and options of one container runtime.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuntimeEndpoint {
    pub address: RuntimeAddress,
    #[serde(default)]
    pub tls_enabled: bool,
    pub label: String,
}

impl RuntimeEndpoint {
    pub fn new(address: RuntimeAddress, tls_enabled: bool, label: impl Into<String>) -> Result<Self, AddressError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(AddressError("empty endpoint label".into()));
        }
        Ok(RuntimeEndpoint {
            address,
            tls_enabled,
            label,
        })
    }

    pub fn parse(raw: &str, tls_enabled: bool, label: impl Into<String>) -> Result<Self, AddressError> {
        Self::new(raw.parse()?, tls_enabled, label)
    }

    /// The local docker socket, labelled as the shared cluster.
    pub fn local_default() -> Self {
        RuntimeEndpoint {
            address: RuntimeAddress::Unix(PathBuf::from(DEFAULT_DOCKER_SOCKET)),
            tls_enabled: false,
            label: "shared-cluster".into(),
        }
    }

    /// Host name under which published ports are reachable.
    pub fn published_host(&self) -> &str {
        match &self.address {
            RuntimeAddress::Unix(_) => "127.0.0.1",
            RuntimeAddress::Tcp { host, .. } => host,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub image_tag: String,
    pub exposed_port: u16,
    pub memory_limit_bytes: u64,
    pub cpu_quota_millicores: u64,
    pub environment_vars: BTreeMap<String, String>,
    pub labels: BTreeMap<String, String>,
}

impl ContainerSpec {
    /// A spec with default resource limits and the session label set.
    pub fn for_session(image_tag: &str, exposed_port: u16, session_id: &str) -> Self {
        let mut labels = BTreeMap::new();
        labels.insert(SESSION_LABEL.to_string(), session_id.to_string());
        ContainerSpec {
            image_tag: image_tag.to_string(),
            exposed_port,
            memory_limit_bytes: DEFAULT_MEMORY_LIMIT_BYTES,
            cpu_quota_millicores: DEFAULT_CPU_MILLICORES,
            environment_vars: BTreeMap::new(),
            labels,
        }
    }

    pub fn session_id(&self) -> Option<&str> {
        self.labels.get(SESSION_LABEL).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.exposed_port == 0 {
            return Err(RuntimeError::InvalidSpec("exposed_port must be in [1, 65535]".into()));
        }
        if self.memory_limit_bytes == 0 {
            return Err(RuntimeError::InvalidSpec("memory_limit_bytes must be positive".into()));
        }
        if self.session_id().is_none_or(str::is_empty) {
            return Err(RuntimeError::InvalidSpec(format!("missing `{SESSION_LABEL}` label")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerStatus {
    Created,
    Running,
    Exited,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHandle {
    pub endpoint: RuntimeEndpoint,
    pub container_id: String,
    /// `host:port` the proxy connects to.
    pub host_address: String,
    pub status: ContainerStatus,
    /// Value of the session label, when known.
    #[serde(default)]
    pub session_id: Option<String>,
}

impl ContainerHandle {
    pub fn runtime_label(&self) -> &str {
        &self.endpoint.label
    }
}

/// Receives build output lines in order.
pub type LogSink<'a> = &'a mut (dyn FnMut(String) + Send);

#[async_trait]
pub trait RuntimeDriver: Send + Sync {
    /// Cheap liveness check.
    async fn ping(&self, endpoint: &RuntimeEndpoint) -> Result<(), RuntimeError>;

    /// Builds `context` (an uncompressed tar with a root `Dockerfile`) as
    /// `tag`. Every output line reaches `sink` before this returns.
    async fn build_image(
        &self,
        endpoint: &RuntimeEndpoint,
        context: Bytes,
        tag: &str,
        sink: LogSink<'_>,
    ) -> Result<(), RuntimeError>;

    async fn create_and_start(
        &self,
        endpoint: &RuntimeEndpoint,
        spec: &ContainerSpec,
    ) -> Result<ContainerHandle, RuntimeError>;

    /// Idempotent: a container that is already gone counts as success.
    async fn stop_and_remove(&self, handle: &ContainerHandle, grace_seconds: u32) -> Result<(), RuntimeError>;

    async fn inspect(&self, handle: &ContainerHandle) -> Result<ContainerHandle, RuntimeError>;

    /// Containers carrying the session label, and only those.
    async fn list_sessions_containers(&self, endpoint: &RuntimeEndpoint) -> Result<Vec<ContainerHandle>, RuntimeError>;
}

/// Runs `build_image` under a deadline, mapping expiry to `BuildTimeout`.
pub async fn build_with_timeout(
    driver: &dyn RuntimeDriver,
    endpoint: &RuntimeEndpoint,
    context: Bytes,
    tag: &str,
    sink: LogSink<'_>,
    timeout: Duration,
) -> Result<(), RuntimeError> {
    match tokio::time::timeout(timeout, driver.build_image(endpoint, context, tag, sink)).await {
        Ok(r) => r,
        Err(_) => Err(RuntimeError::BuildTimeout(timeout)),
    }
}
