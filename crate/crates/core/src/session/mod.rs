//! Session lifecycle: the state machine, its append-only journal, and the
//! manager that drives launches through clone, build and spawn.

mod journal;
mod machine;
mod manager;

pub use journal::{load, replay, rewrite, EventRecord, Journal, JournalRecord, ReplayIssue, SnapshotRecord};
pub use machine::{
    route_path_for, transition, EventKind, Failure, FailureStage, IllegalTransition, Session, SessionEvent, SessionState,
};
pub use manager::{
    new_session_id, ManagerConfig, ManagerDeps, QuotaPolicy, QuotaScope, ReconcileReport, SessionError, SessionManager,
    StopOutcome, BASE_URL_ENV,
};
