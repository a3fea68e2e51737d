//! Multi-user launch hub: turns a git repository carrying a `Dockerfile`
//! into a running container session that users reach through a per-session
//! reverse-proxy route.
//!
//! The pipeline for one session is clone → inspect → build → spawn → proxy,
//! driven by [`session::SessionManager`] as a journaled state machine.

pub mod clock;
pub mod repo;
pub mod http_client;
pub mod runtime;
pub mod builder;
pub mod proxy;
pub mod auth;
pub mod session;
pub mod api;
