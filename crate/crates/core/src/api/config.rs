use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::OAuthProviderConfig;
use crate::repo::DEFAULT_FETCH_TIMEOUT;
use crate::runtime::{RuntimeEndpoint, DEFAULT_BUILD_TIMEOUT, DEFAULT_DOCKER_SOCKET};
use crate::session::QuotaPolicy;

pub const MIN_SECRET_KEY_BYTES: usize = 32;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid value for {var}: {detail}")]
    Env { var: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    Github {
        client_id: String,
        client_secret: String,
    },
    Gitlab {
        client_id: String,
        client_secret: String,
    },
    /// Any OAuth2 provider with explicit endpoints.
    Oauth(OAuthProviderConfig),
    /// Accepts the code `ok-{login}` for each listed login. For testing.
    Static {
        #[serde(default)]
        logins: Vec<String>,
    },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Static { logins: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// `unix:///path`, `/path`, `tcp://host:port` or `host:port`.
    pub address: String,
    pub tls: bool,
    pub label: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            address: format!("unix://{DEFAULT_DOCKER_SOCKET}"),
            tls: false,
            label: "shared-cluster".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HubConfig {
    pub listen_address: String,
    /// Origin the hub is reached at, without a trailing slash.
    pub public_base_url: String,
    /// HMAC key for hub tokens; at least 32 bytes.
    pub secret_key: String,
    pub provider: ProviderConfig,
    pub runtime: RuntimeConfig,
    pub byor_enabled: bool,
    pub quota: QuotaPolicy,
    pub build_timeout_seconds: u64,
    pub fetch_timeout_seconds: u64,
    pub journal_path: PathBuf,
    /// Parent directory for repository checkouts.
    pub workdir: PathBuf,
    pub allow_list: Vec<String>,
    pub admins: Vec<String>,
    /// Port the session server listens on inside containers.
    pub exposed_port: u16,
    /// Static files served at `/`, if set.
    pub ui_dir: Option<PathBuf>,
    /// URL prefix rewrites applied before cloning, e.g. to use a mirror.
    pub git_rewrites: BTreeMap<String, String>,
    pub maintenance_interval_seconds: u64,
    pub log_retention_seconds: u64,
}

impl Default for HubConfig {
    fn default() -> Self {
        HubConfig {
            listen_address: "127.0.0.1:8000".into(),
            public_base_url: "http://127.0.0.1:8000".into(),
            secret_key: String::new(),
            provider: ProviderConfig::default(),
            runtime: RuntimeConfig::default(),
            byor_enabled: false,
            quota: QuotaPolicy::default(),
            build_timeout_seconds: DEFAULT_BUILD_TIMEOUT.as_secs(),
            fetch_timeout_seconds: DEFAULT_FETCH_TIMEOUT.as_secs(),
            journal_path: PathBuf::from("everhub-journal.ndjson"),
            workdir: std::env::temp_dir().join("everhub-checkouts"),
            allow_list: Vec::new(),
            admins: Vec::new(),
            exposed_port: 8888,
            ui_dir: None,
            git_rewrites: BTreeMap::new(),
            maintenance_interval_seconds: 30,
            log_retention_seconds: 24 * 3600,
        }
    }
}

/// Command-line values that override file and environment settings.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub listen_address: Option<String>,
    pub public_base_url: Option<String>,
    pub journal_path: Option<PathBuf>,
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_var<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.to_string(),
        detail: e.to_string(),
    })
}

impl HubConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// File (if any), then `EVERHUB_*` environment, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text, p)?
            }
            None => HubConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.apply_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |k: &str| get(k).filter(|v| !v.is_empty());
        if let Some(v) = get("EVERHUB_LISTEN_ADDRESS") {
            self.listen_address = v;
        }
        if let Some(v) = get("EVERHUB_PUBLIC_BASE_URL") {
            self.public_base_url = v;
        }
        if let Some(v) = get("EVERHUB_SECRET_KEY") {
            self.secret_key = v;
        }
        if let Some(v) = get("EVERHUB_JOURNAL_PATH") {
            self.journal_path = v.into();
        }
        if let Some(v) = get("EVERHUB_WORKDIR") {
            self.workdir = v.into();
        }
        if let Some(v) = get("EVERHUB_RUNTIME_ADDRESS") {
            self.runtime.address = v;
        }
        if let Some(v) = get("EVERHUB_RUNTIME_TLS") {
            self.runtime.tls = parse_var("EVERHUB_RUNTIME_TLS", &v)?;
        }
        if let Some(v) = get("EVERHUB_BYOR_ENABLED") {
            self.byor_enabled = parse_var("EVERHUB_BYOR_ENABLED", &v)?;
        }
        if let Some(v) = get("EVERHUB_MAX_SESSIONS_PER_USER") {
            self.quota.max_sessions_per_user = parse_var("EVERHUB_MAX_SESSIONS_PER_USER", &v)?;
        }
        if let Some(v) = get("EVERHUB_MAX_TOTAL_SESSIONS") {
            self.quota.max_total_sessions = parse_var("EVERHUB_MAX_TOTAL_SESSIONS", &v)?;
        }
        if let Some(v) = get("EVERHUB_IDLE_TIMEOUT_SECONDS") {
            self.quota.idle_timeout_seconds = parse_var("EVERHUB_IDLE_TIMEOUT_SECONDS", &v)?;
        }
        if let Some(v) = get("EVERHUB_BUILD_TIMEOUT_SECONDS") {
            self.build_timeout_seconds = parse_var("EVERHUB_BUILD_TIMEOUT_SECONDS", &v)?;
        }
        if let Some(v) = get("EVERHUB_FETCH_TIMEOUT_SECONDS") {
            self.fetch_timeout_seconds = parse_var("EVERHUB_FETCH_TIMEOUT_SECONDS", &v)?;
        }
        if let Some(v) = get("EVERHUB_ALLOW_LIST") {
            self.allow_list = split_list(&v);
        }
        if let Some(v) = get("EVERHUB_ADMINS") {
            self.admins = split_list(&v);
        }
        let id = get("EVERHUB_OAUTH_CLIENT_ID");
        let secret = get("EVERHUB_OAUTH_CLIENT_SECRET");
        if id.is_some() || secret.is_some() {
            match &mut self.provider {
                ProviderConfig::Github { client_id, client_secret }
                | ProviderConfig::Gitlab { client_id, client_secret } => {
                    if let Some(v) = id {
                        *client_id = v;
                    }
                    if let Some(v) = secret {
                        *client_secret = v;
                    }
                }
                ProviderConfig::Oauth(o) => {
                    if let Some(v) = id {
                        o.client_id = v;
                    }
                    if let Some(v) = secret {
                        o.client_secret = v;
                    }
                }
                ProviderConfig::Static { .. } => {
                    return Err(ConfigError::Env {
                        var: "EVERHUB_OAUTH_CLIENT_ID".into(),
                        detail: "the configured provider is static".into(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &ConfigOverrides) {
        if let Some(v) = &o.listen_address {
            self.listen_address = v.clone();
        }
        if let Some(v) = &o.public_base_url {
            self.public_base_url = v.clone();
        }
        if let Some(v) = &o.journal_path {
            self.journal_path = v.clone();
        }
    }

    /// Checks every field and strips a trailing slash from the base URL.
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.secret_key.len() < MIN_SECRET_KEY_BYTES {
            return invalid(format!(
                "secret_key too short: {} bytes, at least {MIN_SECRET_KEY_BYTES} required",
                self.secret_key.len()
            ));
        }
        if self.listen_address.parse::<SocketAddr>().is_err() {
            return invalid(format!("listen_address `{}` is not host:port", self.listen_address));
        }
        let trimmed = self.public_base_url.trim_end_matches('/').to_string();
        match url::Url::parse(&trimmed) {
            Ok(u) if matches!(u.scheme(), "http" | "https") && u.path() == "/" && u.query().is_none() => {}
            _ => {
                return invalid(format!(
                    "public_base_url `{}` must be an http(s) origin without a path",
                    self.public_base_url
                ))
            }
        }
        self.public_base_url = trimmed;
        self.quota.validate().map_err(ConfigError::Invalid)?;
        if self.exposed_port == 0 {
            return invalid("exposed_port must be in [1, 65535]".into());
        }
        if self.build_timeout_seconds == 0 || self.fetch_timeout_seconds == 0 || self.maintenance_interval_seconds == 0 {
            return invalid("timeouts and intervals must be positive".into());
        }
        self.default_endpoint()?;
        for login in self.allow_list.iter().chain(&self.admins) {
            if crate::auth::normalize_login(login).ok().as_deref() != Some(login.as_str()) {
                return invalid(format!("`{login}` is not a normalized login"));
            }
        }
        if self.journal_path.as_os_str().is_empty() {
            return invalid("journal_path is empty".into());
        }
        Ok(())
    }

    pub fn default_endpoint(&self) -> Result<RuntimeEndpoint, ConfigError> {
        RuntimeEndpoint::parse(&self.runtime.address, self.runtime.tls, self.runtime.label.clone())
            .map_err(|e| ConfigError::Invalid(format!("runtime.address: {e}")))
    }

    pub fn callback_url(&self) -> String {
        format!("{}/hub/oauth_callback", self.public_base_url)
    }

    pub fn secure_cookies(&self) -> bool {
        self.public_base_url.starts_with("https://")
    }

    pub fn build_timeout(&self) -> Duration {
        Duration::from_secs(self.build_timeout_seconds)
    }

    pub fn fetch_timeout(&self) -> Duration {
        Duration::from_secs(self.fetch_timeout_seconds)
    }

    pub fn admin_set(&self) -> BTreeSet<String> {
        self.admins.iter().cloned().collect()
    }

    /// A valid configuration for tests: loopback on an ephemeral port.
    pub fn for_testing(journal_path: impl Into<PathBuf>, workdir: impl Into<PathBuf>) -> Self {
        HubConfig {
            listen_address: "127.0.0.1:0".into(),
            secret_key: "test-secret-key-0123456789abcdef-xyz".into(),
            journal_path: journal_path.into(),
            workdir: workdir.into(),
            runtime: RuntimeConfig {
                address: "unix:///sim/docker.sock".into(),
                tls: false,
                label: "shared-cluster".into(),
            },
            ..HubConfig::default()
        }
    }
}
