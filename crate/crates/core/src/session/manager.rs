use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio_util::sync::CancellationToken;

use super::journal::Journal;
use super::machine::{IllegalTransition, Session, SessionEvent, SessionState};
use crate::builder::{run_build, BuildRegistry, BuildStatus};
use crate::clock::{now_millis, Millis};
use crate::proxy::{ActivitySink, RouteTable, RouteTarget};
use crate::repo::{compute_image_tag, fetch_repository, inspect_manifest, parse_repo_url, Checkout, Fetcher, UrlError};
use crate::runtime::{
    ContainerHandle, ContainerSpec, ContainerStatus, RuntimeDriver, RuntimeEndpoint, DEFAULT_BUILD_TIMEOUT,
    DEFAULT_CPU_MILLICORES, DEFAULT_MEMORY_LIMIT_BYTES, USER_LABEL,
};

/// Environment variable carrying the session's route path into the container.
pub const BASE_URL_ENV: &str = "EVERHUB_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaPolicy {
    pub max_sessions_per_user: u32,
    pub max_total_sessions: u32,
    pub idle_timeout_seconds: u64,
}

impl Default for QuotaPolicy {
    fn default() -> Self {
        QuotaPolicy {
            max_sessions_per_user: 2,
            max_total_sessions: 50,
            idle_timeout_seconds: 3600,
        }
    }
}

impl QuotaPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_sessions_per_user == 0 || self.max_total_sessions == 0 || self.idle_timeout_seconds == 0 {
            return Err("quota values must be positive".into());
        }
        Ok(())
    }

    pub fn idle_timeout_ms(&self) -> Millis {
        self.idle_timeout_seconds.saturating_mul(1000).min(i64::MAX as u64) as Millis
    }
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub quota: QuotaPolicy,
    /// Parent directory for checkouts.
    pub workdir: PathBuf,
    pub build_timeout: Duration,
    /// Port the session's server listens on inside the container.
    pub exposed_port: u16,
    pub memory_limit_bytes: u64,
    pub cpu_quota_millicores: u64,
    pub stop_grace_seconds: u32,
    pub stop_attempts: u32,
    pub stop_retry_delay: Duration,
    pub default_endpoint: RuntimeEndpoint,
}

impl ManagerConfig {
    pub fn new(workdir: impl Into<PathBuf>, default_endpoint: RuntimeEndpoint) -> Self {
        ManagerConfig {
            quota: QuotaPolicy::default(),
            workdir: workdir.into(),
            build_timeout: DEFAULT_BUILD_TIMEOUT,
            exposed_port: 8888,
            memory_limit_bytes: DEFAULT_MEMORY_LIMIT_BYTES,
            cpu_quota_millicores: DEFAULT_CPU_MILLICORES,
            stop_grace_seconds: 10,
            stop_attempts: 3,
            stop_retry_delay: Duration::from_secs(1),
            default_endpoint,
        }
    }
}

/// Collaborators of the session manager.
#[derive(Clone)]
pub struct ManagerDeps {
    pub driver: Arc<dyn RuntimeDriver>,
    pub fetcher: Arc<dyn Fetcher>,
    pub routes: Arc<RouteTable>,
    pub builds: Arc<BuildRegistry>,
    pub journal: Arc<Journal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuotaScope {
    User,
    Total,
}

impl fmt::Display for QuotaScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuotaScope::User => "per user",
            QuotaScope::Total => "in total",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("not allowed to manage session `{0}`")]
    Forbidden(String),
    #[error("quota exceeded: at most {limit} active sessions {scope}")]
    QuotaExceeded { scope: QuotaScope, limit: u32 },
    #[error(transparent)]
    MalformedUrl(#[from] UrlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopOutcome {
    /// A stop was started.
    Accepted,
    /// A stop was already under way.
    AlreadyStopping,
    AlreadyTerminal(SessionState),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileReport {
    /// Running sessions whose container was found and route re-registered.
    pub restored: Vec<String>,
    /// Sessions moved to Failed.
    pub failed: Vec<String>,
    /// Stopping sessions whose stop was completed.
    pub stopped: Vec<String>,
    /// Ids of removed containers that had no live session.
    pub orphans_removed: Vec<String>,
    /// Labels of endpoints that could not be listed.
    pub unreachable_endpoints: Vec<String>,
    /// Sessions left untouched because their endpoint was unreachable.
    pub deferred: Vec<String>,
}

struct Slot {
    session: Mutex<Session>,
    cancel: CancellationToken,
    /// Set while a pipeline or stop task drives the session.
    busy: AtomicBool,
}

impl Slot {
    fn new(session: Session) -> Arc<Slot> {
        Arc::new(Slot {
            session: Mutex::new(session),
            cancel: CancellationToken::new(),
            busy: AtomicBool::new(false),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn state(&self) -> SessionState {
        self.lock().state
    }
}

enum Interrupt {
    /// A stop was requested; the pipeline completes it.
    Stop(Option<ContainerHandle>),
    Shutdown,
    /// The session left the pipeline by other means.
    Abandon,
}

struct Inner {
    config: ManagerConfig,
    deps: ManagerDeps,
    slots: Mutex<BTreeMap<String, Arc<Slot>>>,
    byor: RwLock<HashMap<String, RuntimeEndpoint>>,
    maintenance: tokio::sync::Mutex<()>,
    unreconciled: Mutex<BTreeSet<String>>,
    retry_endpoints: Mutex<BTreeMap<String, RuntimeEndpoint>>,
    shutdown: CancellationToken,
}

/// Owns every session: launches, stops, idle culling and restart recovery.
#[derive(Clone)]
pub struct SessionManager {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for SessionManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionManager")
            .field("sessions", &self.inner.slots_guard().len())
            .finish_non_exhaustive()
    }
}

const ID_ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz234567";

/// Eight base32 characters of a random 40-bit value.
pub fn new_session_id() -> String {
    let v: u64 = rand::thread_rng().gen::<u64>() & ((1 << 40) - 1);
    (0..8)
        .rev()
        .map(|i| ID_ALPHABET[((v >> (i * 5)) & 31) as usize] as char)
        .collect()
}

struct CheckoutDir(PathBuf);

impl Drop for CheckoutDir {
    fn drop(&mut self) {
        if let Err(e) = std::fs::remove_dir_all(&self.0) {
            if e.kind() != std::io::ErrorKind::NotFound {
                tracing::warn!(path = %self.0.display(), error = %e, "could not remove checkout");
            }
        }
    }
}

impl SessionManager {
    /// Creates a manager holding `restored` sessions (from a replayed
    /// journal). Non-terminal ones stay unreconciled until [`reconcile`].
    ///
    /// [`reconcile`]: SessionManager::reconcile
    pub fn new(config: ManagerConfig, deps: ManagerDeps, restored: BTreeMap<String, Session>) -> Self {
        let unreconciled = restored
            .values()
            .filter(|s| s.is_active())
            .map(|s| s.id.clone())
            .collect();
        let slots = restored.into_iter().map(|(id, s)| (id, Slot::new(s))).collect();
        SessionManager {
            inner: Arc::new(Inner {
                config,
                deps,
                slots: Mutex::new(slots),
                byor: RwLock::new(HashMap::new()),
                maintenance: tokio::sync::Mutex::new(()),
                unreconciled: Mutex::new(unreconciled),
                retry_endpoints: Mutex::new(BTreeMap::new()),
                shutdown: CancellationToken::new(),
            }),
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.inner.config
    }

    pub fn driver(&self) -> &Arc<dyn RuntimeDriver> {
        &self.inner.deps.driver
    }

    pub fn routes(&self) -> &Arc<RouteTable> {
        &self.inner.deps.routes
    }

    pub fn builds(&self) -> &Arc<BuildRegistry> {
        &self.inner.deps.builds
    }

    pub fn journal(&self) -> &Arc<Journal> {
        &self.inner.deps.journal
    }

    /// Validates the URL, checks quotas and schedules the launch pipeline.
    pub fn request_launch(
        &self,
        user_login: &str,
        raw_url: &str,
        requested_ref: Option<&str>,
    ) -> Result<Session, SessionError> {
        let mut repo = parse_repo_url(raw_url)?;
        if let Some(r) = requested_ref.filter(|r| !r.trim().is_empty()) {
            repo = repo.with_ref(r.trim());
        }
        let endpoint = self.endpoint_for(user_login);
        let quota = self.inner.config.quota;
        let (slot, session) = {
            let mut slots = self.inner.slots_guard();
            let mut total = 0u32;
            let mut mine = 0u32;
            for slot in slots.values() {
                let s = slot.lock();
                if s.is_active() {
                    total += 1;
                    mine += (s.user_login == user_login) as u32;
                }
            }
            if mine >= quota.max_sessions_per_user {
                return Err(SessionError::QuotaExceeded {
                    scope: QuotaScope::User,
                    limit: quota.max_sessions_per_user,
                });
            }
            if total >= quota.max_total_sessions {
                return Err(SessionError::QuotaExceeded {
                    scope: QuotaScope::Total,
                    limit: quota.max_total_sessions,
                });
            }
            let id = loop {
                let id = new_session_id();
                if !slots.contains_key(&id) {
                    break id;
                }
            };
            let now = now_millis();
            let session = Session::new(&id, user_login, repo, endpoint, now);
            let slot = Slot::new(session.clone());
            slot.busy.store(true, Ordering::SeqCst);
            self.inner.deps.journal.append_snapshot(now, &session);
            slots.insert(id, slot.clone());
            (slot, session)
        };
        tracing::info!(session = %session.id, user = user_login, repo = %session.repo.canonical_url, "launch requested");
        let inner = self.inner.clone();
        tokio::spawn(async move { inner.run_pipeline(slot).await });
        Ok(session)
    }

    /// Stops a session on behalf of `requester`.
    pub fn stop_session(&self, id: &str, requester: &str, is_admin: bool) -> Result<StopOutcome, SessionError> {
        let slot = self.inner.slot(id).ok_or_else(|| SessionError::NotFound(id.to_string()))?;
        {
            let s = slot.lock();
            if s.user_login != requester && !is_admin {
                return Err(SessionError::Forbidden(id.to_string()));
            }
        }
        let event = SessionEvent::StopRequested {
            by: requester.to_string(),
        };
        if self.inner.apply(&slot, &event).is_err() {
            return Ok(match slot.state() {
                SessionState::Stopping => StopOutcome::AlreadyStopping,
                s => StopOutcome::AlreadyTerminal(s),
            });
        }
        slot.cancel.cancel();
        self.inner.spawn_stopper(&slot);
        Ok(StopOutcome::Accepted)
    }

    /// Moves every Running session idle for strictly longer than the idle
    /// timeout to Stopping and returns their ids.
    pub async fn cull_idle(&self, now: Millis) -> Vec<String> {
        let _guard = self.inner.maintenance.lock().await;
        let limit = self.inner.config.quota.idle_timeout_ms();
        let mut culled = Vec::new();
        for slot in self.inner.all_slots() {
            let idle = {
                let s = slot.lock();
                (s.state == SessionState::Running).then(|| now - s.last_activity_at)
            };
            let Some(idle_ms) = idle.filter(|i| *i > limit) else {
                continue;
            };
            if self.inner.apply(&slot, &SessionEvent::IdleTimeout { idle_ms }).is_ok() {
                culled.push(slot.lock().id.clone());
                self.inner.spawn_stopper(&slot);
            }
        }
        if !culled.is_empty() {
            tracing::info!(count = culled.len(), "culled idle sessions");
        }
        culled
    }

    /// Refreshes a Running session's activity timestamp, strictly
    /// increasing it.
    pub fn touch(&self, session_id: &str) {
        if let Some(slot) = self.inner.slot(session_id) {
            let mut s = slot.lock();
            if s.state == SessionState::Running {
                s.last_activity_at = now_millis().max(s.last_activity_at + 1);
            }
        }
    }

    /// Sets the activity timestamp directly.
    pub fn set_last_activity(&self, session_id: &str, at: Millis) -> Result<(), SessionError> {
        let slot = self
            .inner
            .slot(session_id)
            .ok_or_else(|| SessionError::NotFound(session_id.to_string()))?;
        let mut s = slot.lock();
        s.last_activity_at = at.max(s.created_at);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Session> {
        self.inner.slot(id).map(|s| s.lock().clone())
    }

    /// Sessions of `login`, or of everyone when `None`, oldest first.
    pub fn list(&self, login: Option<&str>) -> Vec<Session> {
        let mut out: Vec<Session> = self
            .inner
            .all_slots()
            .iter()
            .map(|s| s.lock().clone())
            .filter(|s| login.is_none_or(|l| s.user_login == l))
            .collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }

    pub fn set_byor(&self, login: &str, endpoint: Option<RuntimeEndpoint>) {
        let mut byor = self.inner.byor.write().unwrap_or_else(|e| e.into_inner());
        match endpoint {
            Some(e) => {
                tracing::info!(user = login, endpoint = %e.address, "byor endpoint set");
                byor.insert(login.to_string(), e);
            }
            None => {
                byor.remove(login);
            }
        }
    }

    pub fn byor_endpoint(&self, login: &str) -> Option<RuntimeEndpoint> {
        self.inner.byor.read().unwrap_or_else(|e| e.into_inner()).get(login).cloned()
    }

    /// Endpoint the next launch of `login` targets.
    pub fn endpoint_for(&self, login: &str) -> RuntimeEndpoint {
        self.byor_endpoint(login)
            .unwrap_or_else(|| self.inner.config.default_endpoint.clone())
    }

    /// The default endpoint, every BYOR endpoint and every endpoint a known
    /// session lives on, deduplicated by label.
    pub fn known_endpoints(&self) -> Vec<RuntimeEndpoint> {
        let mut out: BTreeMap<String, RuntimeEndpoint> = BTreeMap::new();
        let d = &self.inner.config.default_endpoint;
        out.insert(d.label.clone(), d.clone());
        for e in self.inner.byor.read().unwrap_or_else(|e| e.into_inner()).values() {
            out.entry(e.label.clone()).or_insert_with(|| e.clone());
        }
        for slot in self.inner.all_slots() {
            let s = slot.lock();
            let e = s.container.as_ref().map(|c| &c.endpoint).unwrap_or(&s.endpoint);
            out.entry(e.label.clone()).or_insert_with(|| e.clone());
        }
        out.into_values().collect()
    }

    /// Brings restored sessions in line with what the runtimes report and
    /// removes labelled containers that have no live session.
    pub async fn reconcile(&self, endpoints: &[RuntimeEndpoint]) -> ReconcileReport {
        let _guard = self.inner.maintenance.lock().await;
        self.inner.reconcile(endpoints).await
    }

    /// Re-runs reconciliation for endpoints that were unreachable before.
    pub async fn retry_reconcile(&self) -> Option<ReconcileReport> {
        let endpoints: Vec<RuntimeEndpoint> = self
            .inner
            .retry_endpoints
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        if endpoints.is_empty() {
            return None;
        }
        Some(self.reconcile(&endpoints).await)
    }

    /// Restarts stops that failed earlier.
    pub async fn retry_stops(&self) -> usize {
        let _guard = self.inner.maintenance.lock().await;
        let mut n = 0;
        for slot in self.inner.all_slots() {
            if slot.state() == SessionState::Stopping && !slot.busy.load(Ordering::SeqCst) {
                self.inner.spawn_stopper(&slot);
                n += 1;
            }
        }
        n
    }

    /// Drops build logs of sessions that ended more than the retention
    /// window ago.
    pub fn prune_logs(&self, now: Millis, retention: Duration) -> usize {
        let cutoff = now - retention.as_millis() as Millis;
        let live: HashMap<String, Option<Millis>> = self
            .inner
            .all_slots()
            .iter()
            .map(|s| {
                let s = s.lock();
                (s.id.clone(), s.ended_at)
            })
            .collect();
        self.inner.deps.builds.prune(now, &|job| match live.get(&job.session_id) {
            Some(None) => true,
            Some(Some(ended)) => *ended > cutoff,
            None => false,
        })
    }

    /// Stops background pipelines without recording anything further and
    /// closes the journal. Containers are left running.
    pub fn shutdown(&self) {
        self.inner.shutdown.cancel();
        if let Err(e) = self.inner.deps.journal.close() {
            tracing::error!(error = %e, "journal flush failed");
        }
    }
}

impl ActivitySink for SessionManager {
    fn touch(&self, session_id: &str) {
        SessionManager::touch(self, session_id);
    }
}

impl Inner {
    fn slots_guard(&self) -> MutexGuard<'_, BTreeMap<String, Arc<Slot>>> {
        self.slots.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn slot(&self, id: &str) -> Option<Arc<Slot>> {
        self.slots_guard().get(id).cloned()
    }

    fn all_slots(&self) -> Vec<Arc<Slot>> {
        self.slots_guard().values().cloned().collect()
    }

    /// Applies one event under the session's lock, keeps the route table in
    /// step with the Running state, and journals the change.
    fn apply(&self, slot: &Slot, event: &SessionEvent) -> Result<SessionState, IllegalTransition> {
        if self.shutdown.is_cancelled() {
            return Err(IllegalTransition {
                state: slot.state(),
                event: event.kind(),
            });
        }
        let mut s = slot.lock();
        let prev = s.state;
        let now = now_millis();
        let next = match s.apply_event(event, now) {
            Ok(next) => next,
            Err(e) => {
                tracing::debug!(session = %s.id, error = %e, "event dropped");
                return Err(e);
            }
        };
        if next == SessionState::Running && prev != SessionState::Running {
            s.last_activity_at = s.last_activity_at.max(now);
            self.register_route(&s);
        }
        if prev == SessionState::Running && next != SessionState::Running {
            self.deps.routes.unregister(&s.route_path);
        }
        self.deps.journal.append_event(now, &s.id, event, next);
        if next == SessionState::Running {
            self.deps.journal.append_snapshot(now, &s);
        }
        tracing::info!(session = %s.id, event = %event.kind(), state = %next, "session transition");
        Ok(next)
    }

    fn register_route(&self, s: &Session) {
        let Some(container) = &s.container else {
            tracing::error!(session = %s.id, "running session without container");
            return;
        };
        let target = RouteTarget {
            backend: container.host_address.clone(),
            session_id: s.id.clone(),
            owner: s.user_login.clone(),
        };
        if let Err(e) = self.deps.routes.register(&s.route_path, target) {
            tracing::error!(session = %s.id, error = %e, "route registration failed");
        }
    }

    async fn interrupted(&self, slot: &Slot) -> Interrupt {
        tokio::select! {
            biased;
            _ = self.shutdown.cancelled() => Interrupt::Shutdown,
            _ = slot.cancel.cancelled() => Interrupt::Stop(None),
        }
    }

    fn step(&self, slot: &Slot, event: SessionEvent) -> Result<(), Interrupt> {
        match self.apply(slot, &event) {
            Ok(_) => Ok(()),
            Err(_) if self.shutdown.is_cancelled() => Err(Interrupt::Shutdown),
            Err(_) if slot.state() == SessionState::Stopping => Err(Interrupt::Stop(None)),
            Err(_) => Err(Interrupt::Abandon),
        }
    }

    async fn run_pipeline(self: Arc<Self>, slot: Arc<Slot>) {
        let outcome = self.pipeline(&slot).await;
        match outcome {
            Ok(()) | Err(Interrupt::Abandon) | Err(Interrupt::Shutdown) => {}
            Err(Interrupt::Stop(container)) => self.finish_stop(&slot, container).await,
        }
        slot.busy.store(false, Ordering::SeqCst);
        if slot.state() == SessionState::Stopping && !self.shutdown.is_cancelled() {
            self.spawn_stopper(&slot);
        }
    }

    async fn pipeline(&self, slot: &Slot) -> Result<(), Interrupt> {
        let (id, login, repo, endpoint, route_path) = {
            let s = slot.lock();
            (
                s.id.clone(),
                s.user_login.clone(),
                s.repo.clone(),
                s.endpoint.clone(),
                s.route_path.clone(),
            )
        };
        self.step(slot, SessionEvent::Begin {})?;

        let fetcher = self.deps.fetcher.clone();
        let workdir = self.config.workdir.clone();
        let fetch_repo = repo.clone();
        let mut fetch = tokio::task::spawn_blocking(move || {
            std::fs::create_dir_all(&workdir)?;
            fetch_repository(&*fetcher, &fetch_repo, &workdir)
        });
        let fetched = tokio::select! {
            biased;
            i = self.interrupted(slot) => {
                tokio::spawn(async move {
                    if let Ok(Ok(c)) = fetch.await {
                        drop(CheckoutDir(c.root_path));
                    }
                });
                return Err(i);
            }
            r = &mut fetch => r,
        };
        let checkout: Checkout = match fetched {
            Ok(Ok(c)) => c,
            Ok(Err(e)) => return self.step(slot, SessionEvent::CloneErr { detail: e.to_string() }),
            Err(e) => {
                return self.step(slot, SessionEvent::CloneErr {
                    detail: format!("fetch task failed: {e}"),
                })
            }
        };
        let dir = CheckoutDir(checkout.root_path.clone());
        self.step(slot, SessionEvent::CloneOk {
            commit: checkout.repo.resolved_commit.clone(),
        })?;

        let manifest = inspect_manifest(&checkout);
        if !manifest.launchable {
            return self.step(slot, SessionEvent::ManifestRejected {
                detail: format!("no Dockerfile at the repository root\n{}", manifest.checklist()),
            });
        }

        let tag = compute_image_tag(&login, &checkout.repo);
        let build = run_build(
            &self.deps.builds,
            self.deps.driver.as_ref(),
            &id,
            &id,
            &checkout.root_path,
            &endpoint,
            &tag,
            self.config.build_timeout,
        );
        let built = tokio::select! {
            biased;
            i = self.interrupted(slot) => {
                if let Some(job) = self.deps.builds.get(&id) {
                    let _ = job.finish(BuildStatus::Failed, Some("build cancelled".into()));
                }
                return Err(i);
            }
            r = build => r,
        };
        drop(dir);
        match built {
            Ok(image_tag) => self.step(slot, SessionEvent::BuildOk { image_tag })?,
            Err(f) => return self.step(slot, SessionEvent::BuildErr { detail: f.detail }),
        }

        let spec = self.container_spec(&tag, &id, &login, &route_path);
        let created = tokio::select! {
            biased;
            _ = self.shutdown.cancelled() => return Err(Interrupt::Shutdown),
            r = self.deps.driver.create_and_start(&endpoint, &spec) => r,
        };
        match created {
            Err(e) => self.step(slot, SessionEvent::SpawnErr { detail: e.to_string() }),
            Ok(handle) => match self.step(slot, SessionEvent::SpawnOk {
                container: handle.clone(),
            }) {
                Ok(()) => Ok(()),
                Err(Interrupt::Stop(_)) => Err(Interrupt::Stop(Some(handle))),
                Err(Interrupt::Abandon) => {
                    let _ = self.deps.driver.stop_and_remove(&handle, 0).await;
                    Err(Interrupt::Abandon)
                }
                Err(i) => Err(i),
            },
        }
    }

    fn container_spec(&self, tag: &str, id: &str, login: &str, route_path: &str) -> ContainerSpec {
        let mut spec = ContainerSpec::for_session(tag, self.config.exposed_port, id);
        spec.memory_limit_bytes = self.config.memory_limit_bytes;
        spec.cpu_quota_millicores = self.config.cpu_quota_millicores;
        spec.labels.insert(USER_LABEL.into(), login.into());
        spec.environment_vars.insert(BASE_URL_ENV.into(), route_path.into());
        spec.environment_vars.insert("EVERHUB_SESSION".into(), id.into());
        spec.environment_vars.insert("EVERHUB_USER".into(), login.into());
        spec.environment_vars
            .insert("EVERHUB_PORT".into(), self.config.exposed_port.to_string());
        spec
    }

    fn spawn_stopper(self: &Arc<Self>, slot: &Arc<Slot>) {
        if slot.busy.swap(true, Ordering::SeqCst) {
            return;
        }
        let inner = self.clone();
        let slot = slot.clone();
        tokio::spawn(async move {
            let container = slot.lock().container.clone();
            inner.finish_stop(&slot, container).await;
            slot.busy.store(false, Ordering::SeqCst);
        });
    }

    /// Removes the container (with retries) and records StopDone. On
    /// persistent failure the session stays Stopping for a later retry.
    async fn finish_stop(&self, slot: &Slot, container: Option<ContainerHandle>) {
        if let Some(handle) = container.filter(|c| c.status != ContainerStatus::Missing) {
            let attempts = self.config.stop_attempts.max(1);
            let mut done = false;
            for attempt in 1..=attempts {
                if self.shutdown.is_cancelled() {
                    return;
                }
                match self
                    .deps
                    .driver
                    .stop_and_remove(&handle, self.config.stop_grace_seconds)
                    .await
                {
                    Ok(()) => {
                        done = true;
                        break;
                    }
                    Err(e) => {
                        tracing::warn!(container = %handle.container_id, attempt, error = %e, "stop failed");
                        if attempt < attempts {
                            tokio::time::sleep(self.config.stop_retry_delay * attempt).await;
                        }
                    }
                }
            }
            if !done {
                return;
            }
        }
        let _ = self.apply(slot, &SessionEvent::StopDone {});
    }

    async fn reconcile(&self, endpoints: &[RuntimeEndpoint]) -> ReconcileReport {
        let mut report = ReconcileReport::default();
        let pending: BTreeSet<String> = self.unreconciled.lock().unwrap_or_else(|e| e.into_inner()).clone();

        let mut targets: BTreeMap<String, RuntimeEndpoint> = BTreeMap::new();
        for e in endpoints {
            targets.entry(e.label.clone()).or_insert_with(|| e.clone());
        }
        for id in &pending {
            if let Some(slot) = self.slot(id) {
                let s = slot.lock();
                let e = s.container.as_ref().map(|c| &c.endpoint).unwrap_or(&s.endpoint);
                targets.entry(e.label.clone()).or_insert_with(|| e.clone());
            }
        }

        let mut listings: HashMap<String, Vec<ContainerHandle>> = HashMap::new();
        for (label, endpoint) in &targets {
            match self.deps.driver.list_sessions_containers(endpoint).await {
                Ok(list) => {
                    listings.insert(label.clone(), list);
                    self.retry_endpoints.lock().unwrap_or_else(|e| e.into_inner()).remove(label);
                }
                Err(e) => {
                    tracing::warn!(endpoint = %label, error = %e, "endpoint unreachable during reconcile");
                    report.unreachable_endpoints.push(label.clone());
                    self.retry_endpoints
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .insert(label.clone(), endpoint.clone());
                }
            }
        }

        for id in &pending {
            let Some(slot) = self.slot(id) else { continue };
            if slot.busy.load(Ordering::SeqCst) {
                continue;
            }
            let (state, container, label) = {
                let s = slot.lock();
                let label = s
                    .container
                    .as_ref()
                    .map(|c| c.endpoint.label.clone())
                    .unwrap_or_else(|| s.endpoint.label.clone());
                (s.state, s.container.clone(), label)
            };
            let Some(listing) = listings.get(&label) else {
                report.deferred.push(id.clone());
                continue;
            };
            let settled = match state {
                SessionState::Running => {
                    let alive = match container.as_ref().filter(|c| listing.iter().any(|l| l.container_id == c.container_id)) {
                        Some(c) => self.deps.driver.inspect(c).await.ok().filter(|h| h.status == ContainerStatus::Running),
                        None => None,
                    };
                    match alive {
                        Some(handle) => {
                            {
                                let mut s = slot.lock();
                                s.container = Some(handle);
                                s.last_activity_at = s.last_activity_at.max(now_millis());
                                self.register_route(&s);
                                self.deps.journal.append_snapshot(now_millis(), &s);
                            }
                            report.restored.push(id.clone());
                            true
                        }
                        None => {
                            let detail = "container not running after hub restart".to_string();
                            let _ = self.apply(&slot, &SessionEvent::RuntimeLost { detail });
                            report.failed.push(id.clone());
                            true
                        }
                    }
                }
                SessionState::Pending | SessionState::Cloning | SessionState::Building | SessionState::Spawning => {
                    let detail = "interrupted by hub restart".to_string();
                    if state == SessionState::Pending {
                        let _ = self.apply(&slot, &SessionEvent::Begin {});
                    }
                    let event = match state {
                        SessionState::Pending | SessionState::Cloning => SessionEvent::CloneErr { detail },
                        SessionState::Building => SessionEvent::BuildErr { detail },
                        _ => SessionEvent::SpawnErr { detail },
                    };
                    let _ = self.apply(&slot, &event);
                    report.failed.push(id.clone());
                    true
                }
                SessionState::Stopping => {
                    let live = container.filter(|c| listing.iter().any(|l| l.container_id == c.container_id));
                    let removed = match &live {
                        Some(c) => self
                            .deps
                            .driver
                            .stop_and_remove(c, self.config.stop_grace_seconds)
                            .await
                            .is_ok(),
                        None => true,
                    };
                    if removed {
                        let _ = self.apply(&slot, &SessionEvent::StopDone {});
                        report.stopped.push(id.clone());
                    }
                    removed
                }
                SessionState::Stopped | SessionState::Failed => true,
            };
            if settled {
                self.unreconciled.lock().unwrap_or_else(|e| e.into_inner()).remove(id);
            }
        }

        for listing in listings.values() {
            for handle in listing {
                let owner_live = handle
                    .session_id
                    .as_deref()
                    .and_then(|sid| self.slot(sid))
                    .is_some_and(|slot| {
                        let s = slot.lock();
                        s.is_active()
                            && s.container.as_ref().is_none_or(|c| c.container_id == handle.container_id)
                    });
                if owner_live {
                    continue;
                }
                match self.deps.driver.stop_and_remove(handle, self.config.stop_grace_seconds).await {
                    Ok(()) => {
                        tracing::info!(container = %handle.container_id, session = ?handle.session_id, "removed orphan container");
                        report.orphans_removed.push(handle.container_id.clone());
                    }
                    Err(e) => tracing::warn!(container = %handle.container_id, error = %e, "orphan removal failed"),
                }
            }
        }
        tracing::info!(
            restored = report.restored.len(),
            failed = report.failed.len(),
            stopped = report.stopped.len(),
            orphans = report.orphans_removed.len(),
            unreachable = report.unreachable_endpoints.len(),
            "reconcile finished"
        );
        report
    }
}
