//! HTTP surface: JSON API, login routes, the `/user/` proxy mount, and the
//! hub process lifecycle.

mod config;
mod hub;
mod routes;

pub use config::{ConfigError, ConfigOverrides, HubConfig, ProviderConfig, RuntimeConfig, MIN_SECRET_KEY_BYTES};
pub use hub::{provider_from_config, serve, Hub, HubDeps, HubError};
pub use routes::{router, ApiError, AppState, Caller, HubPolicy, SessionSummary, MAX_LOG_WAIT};
