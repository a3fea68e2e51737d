use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use super::config::{ConfigError, HubConfig, ProviderConfig};
use super::routes::{router, AppState, HubPolicy};
use crate::auth::{
    AuthConfig, Authenticator, IdentityProvider, OAuthProvider, OAuthProviderConfig, StaticProvider, TokenSigner,
};
use crate::builder::BuildRegistry;
use crate::clock::now_millis;
use crate::proxy::{Proxy, ProxyConfig, RouteTable};
use crate::repo::{Fetcher, GitFetcher};
use crate::runtime::docker::DockerDriver;
use crate::runtime::RuntimeDriver;
use crate::session::{self, JournalRecord, ManagerConfig, ManagerDeps, ReconcileReport, SessionManager, SnapshotRecord};

#[derive(Debug, Error)]
pub enum HubError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HubError {
    let context = context.into();
    move |source| HubError::Io { context, source }
}

/// Pluggable collaborators; production wiring comes from [`HubDeps::from_config`].
#[derive(Clone)]
pub struct HubDeps {
    pub driver: Arc<dyn RuntimeDriver>,
    pub fetcher: Arc<dyn Fetcher>,
    pub provider: Arc<dyn IdentityProvider>,
}

impl HubDeps {
    /// Docker Engine driver, `git` fetcher and the configured provider.
    pub fn from_config(config: &HubConfig) -> Self {
        let mut fetcher = GitFetcher::default().with_timeout(config.fetch_timeout());
        for (prefix, replacement) in &config.git_rewrites {
            fetcher = fetcher.with_rewrite(prefix.clone(), replacement.clone());
        }
        HubDeps {
            driver: Arc::new(DockerDriver::default()),
            fetcher: Arc::new(fetcher),
            provider: provider_from_config(&config.provider),
        }
    }
}

pub fn provider_from_config(config: &ProviderConfig) -> Arc<dyn IdentityProvider> {
    match config {
        ProviderConfig::Github {
            client_id,
            client_secret,
        } => Arc::new(OAuthProvider::new(OAuthProviderConfig::github(client_id, client_secret))),
        ProviderConfig::Gitlab {
            client_id,
            client_secret,
        } => Arc::new(OAuthProvider::new(OAuthProviderConfig::gitlab(client_id, client_secret))),
        ProviderConfig::Oauth(c) => Arc::new(OAuthProvider::new(c.clone())),
        ProviderConfig::Static { logins } => {
            Arc::new(StaticProvider::new().with_logins(logins.iter().map(String::as_str)))
        }
    }
}

/// Reads the journal, replays it and compacts it to one snapshot per session.
fn recover_sessions(path: &Path) -> Result<std::collections::BTreeMap<String, session::Session>, HubError> {
    let records = session::load(path).map_err(io(format!("reading journal {}", path.display())))?;
    let (sessions, issues) = session::replay(&records);
    for issue in &issues {
        tracing::warn!(%issue, "journal record skipped");
    }
    let now = now_millis();
    let compacted: Vec<JournalRecord> = sessions
        .values()
        .map(|s| {
            JournalRecord::Snapshot(SnapshotRecord {
                ts: now,
                session: s.id.clone(),
                snapshot: s.clone(),
            })
        })
        .collect();
    if path.exists() || !compacted.is_empty() {
        session::rewrite(path, &compacted).map_err(io(format!("compacting journal {}", path.display())))?;
    }
    Ok(sessions)
}

/// A running hub.
pub struct Hub {
    addr: SocketAddr,
    manager: SessionManager,
    report: ReconcileReport,
    stop: CancellationToken,
    server: JoinHandle<std::io::Result<()>>,
    maintenance: JoinHandle<()>,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl Hub {
    /// Validates the config, recovers and reconciles sessions, binds the
    /// listener and starts serving.
    pub async fn start(mut config: HubConfig, deps: HubDeps) -> Result<Hub, HubError> {
        config.validate()?;
        let sessions = recover_sessions(&config.journal_path)?;
        let journal = session::Journal::open(&config.journal_path)
            .map_err(io(format!("opening journal {}", config.journal_path.display())))?;
        std::fs::create_dir_all(&config.workdir).map_err(io(format!("creating workdir {}", config.workdir.display())))?;

        let default_endpoint = config.default_endpoint()?;
        let mut mcfg = ManagerConfig::new(config.workdir.clone(), default_endpoint);
        mcfg.quota = config.quota;
        mcfg.build_timeout = config.build_timeout();
        mcfg.exposed_port = config.exposed_port;
        let routes = Arc::new(RouteTable::new());
        let manager = SessionManager::new(
            mcfg,
            ManagerDeps {
                driver: deps.driver.clone(),
                fetcher: deps.fetcher.clone(),
                routes: routes.clone(),
                builds: Arc::new(BuildRegistry::new(Duration::from_secs(config.log_retention_seconds))),
                journal: Arc::new(journal),
            },
            sessions,
        );
        let report = manager.reconcile(&manager.known_endpoints()).await;

        let mut auth_cfg = AuthConfig::new(config.callback_url());
        auth_cfg.allow_list = config.allow_list.iter().cloned().collect();
        let auth = Arc::new(Authenticator::new(
            deps.provider.clone(),
            TokenSigner::new(config.secret_key.as_bytes().to_vec()),
            auth_cfg,
        ));
        let policy = Arc::new(HubPolicy {
            auth: auth.clone(),
            admins: config.admin_set(),
        });
        let proxy = Proxy::new(routes, policy, Arc::new(manager.clone()), ProxyConfig::default());

        let listener = TcpListener::bind(&config.listen_address)
            .await
            .map_err(io(format!("binding {}", config.listen_address)))?;
        let addr = listener.local_addr().map_err(io("reading bound address"))?;
        let interval = Duration::from_secs(config.maintenance_interval_seconds);
        let retention = Duration::from_secs(config.log_retention_seconds);
        let state = AppState {
            manager: manager.clone(),
            auth,
            proxy,
            config: Arc::new(config),
        };
        let app = router(state).into_make_service_with_connect_info::<SocketAddr>();
        let stop = CancellationToken::new();
        let server_stop = stop.clone();
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move { server_stop.cancelled().await })
                .await
        });
        let maintenance = tokio::spawn(maintenance_loop(manager.clone(), interval, retention, stop.clone()));
        tracing::info!(%addr, "hub listening");
        Ok(Hub {
            addr,
            manager,
            report,
            stop,
            server,
            maintenance,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn manager(&self) -> &SessionManager {
        &self.manager
    }

    /// What startup reconciliation did.
    pub fn reconcile_report(&self) -> &ReconcileReport {
        &self.report
    }

    /// Stops accepting connections, lets in-flight requests finish (up to
    /// `grace`), and flushes the journal. Containers keep running.
    pub async fn shutdown(self, grace: Duration) -> std::io::Result<()> {
        self.stop.cancel();
        self.maintenance.abort();
        self.manager.shutdown();
        let mut server = self.server;
        match tokio::time::timeout(grace, &mut server).await {
            Ok(Ok(r)) => r,
            Ok(Err(e)) if e.is_cancelled() => Ok(()),
            Ok(Err(e)) => Err(std::io::Error::other(e)),
            Err(_) => {
                server.abort();
                Ok(())
            }
        }
    }

    /// Abrupt stop: drops the server and background tasks immediately.
    pub fn kill(self) {
        self.server.abort();
        self.maintenance.abort();
        self.manager.shutdown();
    }
}

async fn maintenance_loop(manager: SessionManager, interval: Duration, retention: Duration, stop: CancellationToken) {
    let mut tick = tokio::time::interval(interval);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    tick.tick().await;
    loop {
        tokio::select! {
            _ = stop.cancelled() => return,
            _ = tick.tick() => {}
        }
        let now = now_millis();
        manager.cull_idle(now).await;
        manager.retry_stops().await;
        if let Some(report) = manager.retry_reconcile().await {
            tracing::info!(?report, "reconcile retried");
        }
        let pruned = manager.prune_logs(now, retention);
        if pruned > 0 {
            tracing::debug!(pruned, "build logs pruned");
        }
    }
}

/// Runs a hub until SIGINT or SIGTERM.
pub async fn serve(config: HubConfig) -> Result<(), HubError> {
    let deps = HubDeps::from_config(&config);
    let hub = Hub::start(config, deps).await?;
    let r = hub.reconcile_report();
    tracing::info!(
        restored = r.restored.len(),
        failed = r.failed.len(),
        orphans = r.orphans_removed.len(),
        "startup reconcile"
    );
    shutdown_signal().await;
    tracing::info!("shutting down");
    hub.shutdown(Duration::from_secs(10)).await.map_err(io("server error"))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
