//! Docker Engine API driver (API version 1.41) over a unix socket or TCP.

use std::collections::BTreeMap;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use http::{Method, Request, StatusCode};
use http_body_util::{BodyExt, Full};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ContainerHandle, ContainerSpec, ContainerStatus, LogSink, RuntimeAddress, RuntimeDriver, RuntimeEndpoint,
    RuntimeError, SESSION_LABEL,
};
use crate::http_client::{self, ClientError, Target};

const API_VERSION: &str = "v1.41";

#[derive(Debug, Clone)]
pub struct DockerDriver {
    pub connect_timeout: Duration,
    /// Deadline for non-streaming calls.
    pub request_timeout: Duration,
}

impl Default for DockerDriver {
    fn default() -> Self {
        DockerDriver {
            connect_timeout: Duration::from_secs(5),
            request_timeout: Duration::from_secs(60),
        }
    }
}

fn target(endpoint: &RuntimeEndpoint) -> Target {
    match &endpoint.address {
        RuntimeAddress::Unix(path) => Target::Unix(path.clone()),
        RuntimeAddress::Tcp { host, port } => Target::Tcp {
            host: host.clone(),
            port: *port,
            tls: endpoint.tls_enabled,
        },
    }
}

fn unreachable(endpoint: &RuntimeEndpoint, e: impl std::fmt::Display) -> RuntimeError {
    RuntimeError::RuntimeUnreachable(format!("{}: {e}", endpoint.label))
}

fn map_client_error(endpoint: &RuntimeEndpoint, e: ClientError) -> RuntimeError {
    if e.is_connect() {
        unreachable(endpoint, e)
    } else {
        RuntimeError::Protocol(e.to_string())
    }
}

/// `message` field of a Docker error body, or the raw body.
fn error_message(body: &[u8]) -> String {
    serde_json::from_slice::<Value>(body)
        .ok()
        .and_then(|v| v.get("message").and_then(Value::as_str).map(String::from))
        .unwrap_or_else(|| String::from_utf8_lossy(body).trim().to_string())
}

/// One decoded item of the build progress stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildStreamEvent {
    Line(String),
    Error(String),
}

/// Incremental decoder for the newline-delimited JSON that `POST /build`
/// streams back. `stream` text is re-split on newlines so partial lines
/// spanning several messages come out whole.
#[derive(Debug, Default)]
pub struct BuildStreamDecoder {
    buf: Vec<u8>,
    pending: String,
}

impl BuildStreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) -> Vec<BuildStreamEvent> {
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.buf.drain(..=pos).collect();
            self.decode_message(&line[..line.len() - 1], &mut out);
        }
        out
    }

    pub fn finish(mut self) -> Vec<BuildStreamEvent> {
        let mut out = Vec::new();
        let rest = std::mem::take(&mut self.buf);
        self.decode_message(&rest, &mut out);
        if !self.pending.is_empty() {
            out.push(BuildStreamEvent::Line(std::mem::take(&mut self.pending)));
        }
        out
    }

    fn flush_pending_lines(&mut self, out: &mut Vec<BuildStreamEvent>) {
        while let Some(pos) = self.pending.find('\n') {
            let line: String = self.pending.drain(..=pos).collect();
            out.push(BuildStreamEvent::Line(line.trim_end_matches(['\n', '\r']).to_string()));
        }
    }

    fn decode_message(&mut self, raw: &[u8], out: &mut Vec<BuildStreamEvent>) {
        let trimmed = raw.trim_ascii();
        if trimmed.is_empty() {
            return;
        }
        let Ok(msg) = serde_json::from_slice::<Value>(trimmed) else {
            out.push(BuildStreamEvent::Line(String::from_utf8_lossy(trimmed).into_owned()));
            return;
        };
        if let Some(err) = msg.get("error") {
            let text = err
                .as_str()
                .map(String::from)
                .or_else(|| {
                    msg.pointer("/errorDetail/message")
                        .and_then(Value::as_str)
                        .map(String::from)
                })
                .unwrap_or_else(|| err.to_string());
            if !self.pending.is_empty() {
                out.push(BuildStreamEvent::Line(std::mem::take(&mut self.pending)));
            }
            out.push(BuildStreamEvent::Error(text));
        } else if let Some(text) = msg.get("stream").and_then(Value::as_str) {
            self.pending.push_str(text);
            self.flush_pending_lines(out);
        } else if let Some(status) = msg.get("status").and_then(Value::as_str) {
            if msg.get("progress").is_none() {
                let line = match msg.get("id").and_then(Value::as_str) {
                    Some(id) => format!("{id}: {status}"),
                    None => status.to_string(),
                };
                out.push(BuildStreamEvent::Line(line));
            }
        }
    }
}

#[derive(Deserialize)]
struct CreateResponse {
    #[serde(rename = "Id")]
    id: String,
}

impl DockerDriver {
    pub fn new() -> Self {
        Self::default()
    }

    async fn call(
        &self,
        endpoint: &RuntimeEndpoint,
        method: Method,
        path: &str,
        body: Option<Value>,
    ) -> Result<(StatusCode, Bytes), RuntimeError> {
        let target = target(endpoint);
        let mut builder = Request::builder()
            .method(method)
            .uri(format!("/{API_VERSION}{path}"))
            .header(http::header::HOST, target.authority());
        let payload = match body {
            Some(v) => {
                builder = builder.header(http::header::CONTENT_TYPE, "application/json");
                Bytes::from(v.to_string())
            }
            None => Bytes::new(),
        };
        let req = builder
            .body(Full::new(payload))
            .map_err(|e| RuntimeError::Protocol(e.to_string()))?;
        let fut = http_client::send_full(&target, req, self.connect_timeout);
        match tokio::time::timeout(self.request_timeout, fut).await {
            Ok(r) => r.map_err(|e| map_client_error(endpoint, e)),
            Err(_) => Err(unreachable(endpoint, "request timed out")),
        }
    }

    async fn remove(&self, endpoint: &RuntimeEndpoint, id: &str) -> Result<(), RuntimeError> {
        let (status, body) = self
            .call(endpoint, Method::DELETE, &format!("/containers/{id}?force=true"), None)
            .await?;
        match status.as_u16() {
            200..=299 | 404 | 409 => Ok(()),
            _ => Err(RuntimeError::Protocol(error_message(&body))),
        }
    }

    async fn inspect_raw(&self, endpoint: &RuntimeEndpoint, id: &str) -> Result<Option<Value>, RuntimeError> {
        let (status, body) = self
            .call(endpoint, Method::GET, &format!("/containers/{id}/json"), None)
            .await?;
        match status.as_u16() {
            200 => serde_json::from_slice(&body)
                .map(Some)
                .map_err(|e| RuntimeError::Protocol(e.to_string())),
            404 => Ok(None),
            _ => Err(RuntimeError::Protocol(error_message(&body))),
        }
    }
}

fn status_from_state(state: &str) -> ContainerStatus {
    match state {
        "created" => ContainerStatus::Created,
        "running" | "paused" | "restarting" => ContainerStatus::Running,
        _ => ContainerStatus::Exited,
    }
}

/// Host port published for `port/tcp` in an inspect document.
fn published_port(inspect: &Value, port: u16) -> Option<String> {
    inspect
        .pointer("/NetworkSettings/Ports")
        .and_then(|ports| ports.get(format!("{port}/tcp")))
        .and_then(Value::as_array)
        .and_then(|bindings| {
            bindings
                .iter()
                .filter_map(|b| b.get("HostPort").and_then(Value::as_str))
                .find(|p| !p.is_empty())
                .map(String::from)
        })
}

fn first_published_port(inspect: &Value) -> Option<String> {
    let ports = inspect.pointer("/NetworkSettings/Ports")?.as_object()?;
    ports.values().filter_map(Value::as_array).flatten().find_map(|b| {
        b.get("HostPort")
            .and_then(Value::as_str)
            .filter(|p| !p.is_empty())
            .map(String::from)
    })
}

fn handle_from_inspect(endpoint: &RuntimeEndpoint, id: &str, inspect: &Value, port: Option<u16>) -> ContainerHandle {
    let state = inspect.pointer("/State/Status").and_then(Value::as_str).unwrap_or("");
    let host_port = port
        .and_then(|p| published_port(inspect, p))
        .or_else(|| first_published_port(inspect));
    ContainerHandle {
        endpoint: endpoint.clone(),
        container_id: inspect.get("Id").and_then(Value::as_str).unwrap_or(id).to_string(),
        host_address: host_port
            .map(|p| format!("{}:{p}", endpoint.published_host()))
            .unwrap_or_default(),
        status: status_from_state(state),
        session_id: inspect
            .pointer("/Config/Labels")
            .and_then(|l| l.get(SESSION_LABEL))
            .and_then(Value::as_str)
            .map(String::from),
    }
}

/// JSON body for `POST /containers/create`.
pub fn create_body(spec: &ContainerSpec) -> Value {
    let port_key = format!("{}/tcp", spec.exposed_port);
    let env: Vec<String> = spec.environment_vars.iter().map(|(k, v)| format!("{k}={v}")).collect();
    json!({
        "Image": spec.image_tag,
        "Env": env,
        "Labels": spec.labels,
        "ExposedPorts": { port_key.clone(): {} },
        "HostConfig": {
            "PortBindings": { port_key: [{ "HostIp": "", "HostPort": "" }] },
            "Memory": spec.memory_limit_bytes,
            "NanoCpus": spec.cpu_quota_millicores.saturating_mul(1_000_000),
        },
    })
}

/// Query string value for the session-label filter.
fn label_filter() -> String {
    let filters = json!({ "label": [SESSION_LABEL] }).to_string();
    url::form_urlencoded::byte_serialize(filters.as_bytes()).collect()
}

#[async_trait]
impl RuntimeDriver for DockerDriver {
    async fn ping(&self, endpoint: &RuntimeEndpoint) -> Result<(), RuntimeError> {
        let (status, body) = self.call(endpoint, Method::GET, "/_ping", None).await?;
        if status.is_success() {
            Ok(())
        } else {
            Err(unreachable(endpoint, error_message(&body)))
        }
    }

    async fn build_image(
        &self,
        endpoint: &RuntimeEndpoint,
        context: Bytes,
        tag: &str,
        sink: LogSink<'_>,
    ) -> Result<(), RuntimeError> {
        let target = target(endpoint);
        let tag_q: String = url::form_urlencoded::byte_serialize(tag.as_bytes()).collect();
        let req = Request::post(format!("/{API_VERSION}/build?t={tag_q}&rm=true&forcerm=true"))
            .header(http::header::HOST, target.authority())
            .header(http::header::CONTENT_TYPE, "application/x-tar")
            .body(Full::new(context))
            .map_err(|e| RuntimeError::Protocol(e.to_string()))?;
        let resp = http_client::send(&target, req, self.connect_timeout)
            .await
            .map_err(|e| map_client_error(endpoint, e))?;
        let status = resp.status();
        let mut body = resp.into_body();
        if !status.is_success() {
            let bytes = body
                .collect()
                .await
                .map(|c| c.to_bytes())
                .unwrap_or_default();
            return Err(RuntimeError::BuildFailed(error_message(&bytes)));
        }
        let mut decoder = BuildStreamDecoder::new();
        let mut failure = None;
        let mut handle = |events: Vec<BuildStreamEvent>, failure: &mut Option<String>| {
            for ev in events {
                match ev {
                    BuildStreamEvent::Line(l) => sink(l),
                    BuildStreamEvent::Error(e) => {
                        sink(e.clone());
                        failure.get_or_insert(e);
                    }
                }
            }
        };
        while let Some(frame) = body.frame().await {
            let frame = frame.map_err(|e| RuntimeError::Protocol(e.to_string()))?;
            if let Some(data) = frame.data_ref() {
                handle(decoder.push(data), &mut failure);
            }
        }
        handle(decoder.finish(), &mut failure);
        match failure {
            Some(detail) => Err(RuntimeError::BuildFailed(detail)),
            None => Ok(()),
        }
    }

    async fn create_and_start(
        &self,
        endpoint: &RuntimeEndpoint,
        spec: &ContainerSpec,
    ) -> Result<ContainerHandle, RuntimeError> {
        spec.validate()?;
        let (status, body) = self
            .call(endpoint, Method::POST, "/containers/create", Some(create_body(spec)))
            .await?;
        let id = match status.as_u16() {
            200 | 201 => {
                serde_json::from_slice::<CreateResponse>(&body)
                    .map_err(|e| RuntimeError::Protocol(e.to_string()))?
                    .id
            }
            404 => return Err(RuntimeError::ImageMissing(spec.image_tag.clone())),
            _ => return Err(RuntimeError::StartFailed(error_message(&body))),
        };
        let (status, body) = self
            .call(endpoint, Method::POST, &format!("/containers/{id}/start"), None)
            .await?;
        if !(status.is_success() || status == StatusCode::NOT_MODIFIED) {
            let _ = self.remove(endpoint, &id).await;
            return Err(RuntimeError::StartFailed(error_message(&body)));
        }
        let inspect = self
            .inspect_raw(endpoint, &id)
            .await?
            .ok_or_else(|| RuntimeError::StartFailed(format!("container {id} vanished after start")))?;
        let handle = handle_from_inspect(endpoint, &id, &inspect, Some(spec.exposed_port));
        if handle.status != ContainerStatus::Running {
            let code = inspect.pointer("/State/ExitCode").cloned().unwrap_or(Value::Null);
            let _ = self.remove(endpoint, &id).await;
            return Err(RuntimeError::StartFailed(format!("container {id} exited with code {code}")));
        }
        if handle.host_address.is_empty() {
            let _ = self.remove(endpoint, &id).await;
            return Err(RuntimeError::StartFailed(format!(
                "container {id} has no published port for {}/tcp",
                spec.exposed_port
            )));
        }
        Ok(handle)
    }

    async fn stop_and_remove(&self, handle: &ContainerHandle, grace_seconds: u32) -> Result<(), RuntimeError> {
        if handle.container_id.is_empty() {
            return Ok(());
        }
        let ep = &handle.endpoint;
        let (status, body) = self
            .call(
                ep,
                Method::POST,
                &format!("/containers/{}/stop?t={grace_seconds}", handle.container_id),
                None,
            )
            .await?;
        if !matches!(status.as_u16(), 200..=299 | 304 | 404) {
            tracing::warn!(container = %handle.container_id, "stop returned {status}: {}", error_message(&body));
        }
        self.remove(ep, &handle.container_id).await
    }

    async fn inspect(&self, handle: &ContainerHandle) -> Result<ContainerHandle, RuntimeError> {
        match self.inspect_raw(&handle.endpoint, &handle.container_id).await? {
            Some(v) => {
                let mut fresh = handle_from_inspect(&handle.endpoint, &handle.container_id, &v, None);
                if !handle.host_address.is_empty() {
                    fresh.host_address = handle.host_address.clone();
                }
                Ok(fresh)
            }
            None => Ok(ContainerHandle {
                status: ContainerStatus::Missing,
                ..handle.clone()
            }),
        }
    }

    async fn list_sessions_containers(&self, endpoint: &RuntimeEndpoint) -> Result<Vec<ContainerHandle>, RuntimeError> {
        let path = format!("/containers/json?all=true&filters={}", label_filter());
        let (status, body) = self.call(endpoint, Method::GET, &path, None).await?;
        if !status.is_success() {
            return Err(RuntimeError::Protocol(error_message(&body)));
        }
        let items: Vec<Value> = serde_json::from_slice(&body).map_err(|e| RuntimeError::Protocol(e.to_string()))?;
        Ok(items
            .iter()
            .filter_map(|item| {
                let labels: BTreeMap<String, String> = item
                    .get("Labels")
                    .and_then(|l| serde_json::from_value(l.clone()).ok())
                    .unwrap_or_default();
                let session = labels.get(SESSION_LABEL)?.clone();
                let id = item.get("Id")?.as_str()?.to_string();
                let public_port = item
                    .get("Ports")
                    .and_then(Value::as_array)
                    .and_then(|ports| ports.iter().find_map(|p| p.get("PublicPort").and_then(Value::as_u64)));
                Some(ContainerHandle {
                    endpoint: endpoint.clone(),
                    container_id: id,
                    host_address: public_port
                        .map(|p| format!("{}:{p}", endpoint.published_host()))
                        .unwrap_or_default(),
                    status: status_from_state(item.get("State").and_then(Value::as_str).unwrap_or("")),
                    session_id: Some(session),
                })
            })
            .collect())
    }
}
