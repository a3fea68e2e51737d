//! In-memory container runtime.
//!
//! Keeps per-endpoint image and container tables, and lets tests script
//! build output, inject latency and failures per operation, flip endpoints
//! unreachable, and crash or remove containers behind the hub's back. With
//! [`SimRuntime::with_backends`] every started container also gets a real
//! HTTP listener on loopback so proxied traffic has somewhere to go.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::service::service_fn;
use hyper_util::rt::TokioIo;
use tokio::task::JoinHandle;

use super::{
    ContainerHandle, ContainerSpec, ContainerStatus, LogSink, RuntimeDriver, RuntimeEndpoint, RuntimeError,
    SESSION_LABEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimOp {
    Ping,
    Build,
    Create,
    Stop,
    Inspect,
    List,
}

/// Scripted output of one build.
#[derive(Debug, Clone)]
pub struct BuildScript {
    pub lines: Vec<String>,
    /// `Err(detail)` makes the build fail after emitting `lines`.
    pub outcome: Result<(), String>,
    pub line_delay: Duration,
}

impl BuildScript {
    pub fn success(lines: impl IntoIterator<Item = impl Into<String>>) -> Self {
        BuildScript {
            lines: lines.into_iter().map(Into::into).collect(),
            outcome: Ok(()),
            line_delay: Duration::ZERO,
        }
    }

    pub fn failure(lines: impl IntoIterator<Item = impl Into<String>>, detail: &str) -> Self {
        BuildScript {
            outcome: Err(detail.to_string()),
            ..Self::success(lines)
        }
    }

    pub fn with_line_delay(mut self, delay: Duration) -> Self {
        self.line_delay = delay;
        self
    }
}

impl Default for BuildScript {
    fn default() -> Self {
        BuildScript::success(["Step 1/1 : FROM scratch", "Successfully built"])
    }
}

/// One recorded driver call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimCall {
    pub op: SimOp,
    pub endpoint: String,
    pub subject: String,
}

struct SimContainer {
    handle: ContainerHandle,
    labels: BTreeMap<String, String>,
    backend: Option<JoinHandle<()>>,
}

impl Drop for SimContainer {
    fn drop(&mut self) {
        if let Some(task) = self.backend.take() {
            task.abort();
        }
    }
}

#[derive(Default)]
struct EndpointState {
    images: HashSet<String>,
    containers: BTreeMap<String, SimContainer>,
}

#[derive(Default)]
struct SimState {
    endpoints: HashMap<String, EndpointState>,
    scripts: HashMap<String, BuildScript>,
    default_script: BuildScript,
    latency: HashMap<SimOp, Duration>,
    failures: HashMap<SimOp, VecDeque<RuntimeError>>,
    unreachable: HashSet<String>,
    start_fails: HashSet<String>,
    calls: Vec<SimCall>,
}

#[derive(Default)]
pub struct SimRuntime {
    state: Mutex<SimState>,
    next_id: AtomicU64,
    serve_backends: bool,
}

impl SimRuntime {
    pub fn new() -> Self {
        Self::default()
    }

    /// Started containers get a loopback HTTP backend answering
    /// `sim backend {container_id}: {method} {path}`.
    pub fn with_backends() -> Self {
        SimRuntime {
            serve_backends: true,
            ..Self::default()
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_default_build(&self, script: BuildScript) {
        self.lock().default_script = script;
    }

    pub fn script_build(&self, tag: &str, script: BuildScript) {
        self.lock().scripts.insert(tag.to_string(), script);
    }

    pub fn set_latency(&self, op: SimOp, latency: Duration) {
        self.lock().latency.insert(op, latency);
    }

    /// The next call of `op` fails with `err`.
    pub fn fail_next(&self, op: SimOp, err: RuntimeError) {
        self.lock().failures.entry(op).or_default().push_back(err);
    }

    pub fn set_unreachable(&self, label: &str, unreachable: bool) {
        let mut st = self.lock();
        if unreachable {
            st.unreachable.insert(label.to_string());
        } else {
            st.unreachable.remove(label);
        }
    }

    /// Containers of `tag` exit right after start.
    pub fn start_exits_immediately(&self, tag: &str) {
        self.lock().start_fails.insert(tag.to_string());
    }

    pub fn add_image(&self, endpoint: &RuntimeEndpoint, tag: &str) {
        self.lock()
            .endpoints
            .entry(endpoint.label.clone())
            .or_default()
            .images
            .insert(tag.to_string());
    }

    pub fn has_image(&self, endpoint: &RuntimeEndpoint, tag: &str) -> bool {
        self.lock()
            .endpoints
            .get(&endpoint.label)
            .is_some_and(|e| e.images.contains(tag))
    }

    /// Marks a container as exited, as if its process died.
    pub fn crash_container(&self, container_id: &str) {
        let mut st = self.lock();
        for ep in st.endpoints.values_mut() {
            if let Some(c) = ep.containers.get_mut(container_id) {
                c.handle.status = ContainerStatus::Exited;
                if let Some(task) = c.backend.take() {
                    task.abort();
                }
            }
        }
    }

    /// Removes a container without going through the driver.
    pub fn remove_container(&self, container_id: &str) {
        let mut st = self.lock();
        for ep in st.endpoints.values_mut() {
            ep.containers.remove(container_id);
        }
    }

    /// Adds a running container with arbitrary labels, e.g. one the hub does
    /// not own. Returns its id.
    pub fn insert_container(&self, endpoint: &RuntimeEndpoint, labels: BTreeMap<String, String>) -> String {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("sim{n:012x}");
        let handle = ContainerHandle {
            endpoint: endpoint.clone(),
            container_id: id.clone(),
            host_address: format!("sim-node-{n}:8888"),
            status: ContainerStatus::Running,
            session_id: labels.get(SESSION_LABEL).cloned(),
        };
        self.lock()
            .endpoints
            .entry(endpoint.label.clone())
            .or_default()
            .containers
            .insert(
                id.clone(),
                SimContainer {
                    handle,
                    labels,
                    backend: None,
                },
            );
        id
    }

    /// All containers on an endpoint, labelled or not.
    pub fn containers(&self, endpoint_label: &str) -> Vec<ContainerHandle> {
        self.lock()
            .endpoints
            .get(endpoint_label)
            .map(|e| e.containers.values().map(|c| c.handle.clone()).collect())
            .unwrap_or_default()
    }

    pub fn calls(&self) -> Vec<SimCall> {
        self.lock().calls.clone()
    }

    pub fn calls_of(&self, op: SimOp) -> Vec<SimCall> {
        self.calls().into_iter().filter(|c| c.op == op).collect()
    }

    /// Records the call, applies latency, reachability and injected failures.
    async fn enter(&self, op: SimOp, endpoint: &RuntimeEndpoint, subject: &str) -> Result<(), RuntimeError> {
        let latency = {
            let mut st = self.lock();
            st.calls.push(SimCall {
                op,
                endpoint: endpoint.label.clone(),
                subject: subject.to_string(),
            });
            st.latency.get(&op).copied()
        };
        if let Some(d) = latency {
            tokio::time::sleep(d).await;
        }
        let mut st = self.lock();
        if st.unreachable.contains(&endpoint.label) {
            return Err(RuntimeError::RuntimeUnreachable(endpoint.label.clone()));
        }
        if let Some(err) = st.failures.get_mut(&op).and_then(VecDeque::pop_front) {
            return Err(err);
        }
        Ok(())
    }
}

fn context_has_dockerfile(context: &[u8]) -> bool {
    let mut archive = tar::Archive::new(context);
    let Ok(entries) = archive.entries() else {
        return false;
    };
    for entry in entries.flatten() {
        let is_file = entry.header().entry_type().is_file();
        if let Ok(path) = entry.path() {
            let p = path.to_string_lossy();
            if is_file && (p == "Dockerfile" || p == "./Dockerfile") {
                return true;
            }
        }
    }
    false
}

async fn spawn_backend(container_id: String) -> std::io::Result<(String, JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let task = tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                return;
            };
            let id = container_id.clone();
            tokio::spawn(async move {
                let svc = service_fn(move |req: http::Request<hyper::body::Incoming>| {
                    let id = id.clone();
                    async move {
                        let line = format!("sim backend {id}: {} {}", req.method(), req.uri().path());
                        let _ = req.into_body().collect().await;
                        Ok::<_, Infallible>(http::Response::new(Full::new(Bytes::from(line))))
                    }
                });
                let _ = hyper::server::conn::http1::Builder::new()
                    .serve_connection(TokioIo::new(stream), svc)
                    .await;
            });
        }
    });
    Ok((addr.to_string(), task))
}

#[async_trait]
impl RuntimeDriver for SimRuntime {
    async fn ping(&self, endpoint: &RuntimeEndpoint) -> Result<(), RuntimeError> {
        self.enter(SimOp::Ping, endpoint, "").await
    }

    async fn build_image(
        &self,
        endpoint: &RuntimeEndpoint,
        context: Bytes,
        tag: &str,
        sink: LogSink<'_>,
    ) -> Result<(), RuntimeError> {
        self.enter(SimOp::Build, endpoint, tag).await?;
        if !context_has_dockerfile(&context) {
            return Err(RuntimeError::BuildFailed(
                "Cannot locate specified Dockerfile: Dockerfile".into(),
            ));
        }
        let script = {
            let st = self.lock();
            st.scripts.get(tag).cloned().unwrap_or_else(|| st.default_script.clone())
        };
        for line in script.lines {
            if !script.line_delay.is_zero() {
                tokio::time::sleep(script.line_delay).await;
            }
            sink(line);
        }
        match script.outcome {
            Ok(()) => {
                self.add_image(endpoint, tag);
                Ok(())
            }
            Err(detail) => Err(RuntimeError::BuildFailed(detail)),
        }
    }

    async fn create_and_start(
        &self,
        endpoint: &RuntimeEndpoint,
        spec: &ContainerSpec,
    ) -> Result<ContainerHandle, RuntimeError> {
        spec.validate()?;
        self.enter(SimOp::Create, endpoint, &spec.image_tag).await?;
        let exits = {
            let st = self.lock();
            if !st
                .endpoints
                .get(&endpoint.label)
                .is_some_and(|e| e.images.contains(&spec.image_tag))
            {
                return Err(RuntimeError::ImageMissing(spec.image_tag.clone()));
            }
            st.start_fails.contains(&spec.image_tag)
        };
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("sim{n:012x}");
        let (host_address, backend) = if self.serve_backends && !exits {
            let (addr, task) = spawn_backend(id.clone())
                .await
                .map_err(|e| RuntimeError::StartFailed(e.to_string()))?;
            (addr, Some(task))
        } else {
            (format!("sim-node-{n}:{}", spec.exposed_port), None)
        };
        let handle = ContainerHandle {
            endpoint: endpoint.clone(),
            container_id: id.clone(),
            host_address,
            status: if exits {
                ContainerStatus::Exited
            } else {
                ContainerStatus::Running
            },
            session_id: spec.session_id().map(String::from),
        };
        self.lock()
            .endpoints
            .entry(endpoint.label.clone())
            .or_default()
            .containers
            .insert(
                id.clone(),
                SimContainer {
                    handle: handle.clone(),
                    labels: spec.labels.clone(),
                    backend,
                },
            );
        if exits {
            return Err(RuntimeError::StartFailed(format!("container {id} exited with code 1")));
        }
        Ok(handle)
    }

    async fn stop_and_remove(&self, handle: &ContainerHandle, _grace_seconds: u32) -> Result<(), RuntimeError> {
        self.enter(SimOp::Stop, &handle.endpoint, &handle.container_id).await?;
        let removed = self
            .lock()
            .endpoints
            .get_mut(&handle.endpoint.label)
            .and_then(|e| e.containers.remove(&handle.container_id));
        drop(removed);
        Ok(())
    }

    async fn inspect(&self, handle: &ContainerHandle) -> Result<ContainerHandle, RuntimeError> {
        self.enter(SimOp::Inspect, &handle.endpoint, &handle.container_id).await?;
        let st = self.lock();
        let found = st
            .endpoints
            .get(&handle.endpoint.label)
            .and_then(|e| e.containers.get(&handle.container_id));
        Ok(match found {
            Some(c) => c.handle.clone(),
            None => ContainerHandle {
                status: ContainerStatus::Missing,
                ..handle.clone()
            },
        })
    }

    async fn list_sessions_containers(&self, endpoint: &RuntimeEndpoint) -> Result<Vec<ContainerHandle>, RuntimeError> {
        self.enter(SimOp::List, endpoint, "").await?;
        Ok(self
            .lock()
            .endpoints
            .get(&endpoint.label)
            .map(|e| {
                e.containers
                    .values()
                    .filter(|c| c.labels.contains_key(SESSION_LABEL))
                    .map(|c| c.handle.clone())
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Builds an uncompressed tar holding a single root `Dockerfile`.
pub fn dockerfile_context(dockerfile: &str) -> Bytes {
    let mut builder = tar::Builder::new(Vec::new());
    let mut header = tar::Header::new_gnu();
    header.set_size(dockerfile.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    builder
        .append_data(&mut header, "Dockerfile", dockerfile.as_bytes())
        .expect("in-memory tar");
    Bytes::from(builder.into_inner().expect("in-memory tar"))
}
