//! Hand-written session lifecycle table, kept apart from the library so the
//! brute-force check compares two independent encodings.

use everhub::session::{EventKind, SessionState};

/// Rows are current states, columns are events; `-` marks an illegal pair.
pub const TABLE: &str = "
state     Begin    CloneOk  CloneErr ManifestRejected BuildOk  BuildErr SpawnOk  SpawnErr StopRequested StopDone IdleTimeout RuntimeLost
Pending   Cloning  -        -        -                -        -        -        -        Stopping      -        -           -
Cloning   -        Building Failed   -                -        -        -        -        Stopping      -        -           -
Building  -        -        -        Failed           Spawning Failed   -        -        Stopping      -        -           -
Spawning  -        -        -        -                -        -        Running  Failed   Stopping      -        -           -
Running   -        -        -        -                -        -        -        -        Stopping      -        Stopping    Failed
Stopping  -        -        -        -                -        -        -        -        Stopping      Stopped  -           -
Stopped   -        -        -        -                -        -        -        -        -             -        -           -
Failed    -        -        -        -                -        -        -        -        -             -        -           -
";

fn state_named(name: &str) -> SessionState {
    match name {
        "Pending" => SessionState::Pending,
        "Cloning" => SessionState::Cloning,
        "Building" => SessionState::Building,
        "Spawning" => SessionState::Spawning,
        "Running" => SessionState::Running,
        "Stopping" => SessionState::Stopping,
        "Stopped" => SessionState::Stopped,
        "Failed" => SessionState::Failed,
        other => panic!("unknown state `{other}` in table"),
    }
}

fn event_named(name: &str) -> EventKind {
    match name {
        "Begin" => EventKind::Begin,
        "CloneOk" => EventKind::CloneOk,
        "CloneErr" => EventKind::CloneErr,
        "ManifestRejected" => EventKind::ManifestRejected,
        "BuildOk" => EventKind::BuildOk,
        "BuildErr" => EventKind::BuildErr,
        "SpawnOk" => EventKind::SpawnOk,
        "SpawnErr" => EventKind::SpawnErr,
        "StopRequested" => EventKind::StopRequested,
        "StopDone" => EventKind::StopDone,
        "IdleTimeout" => EventKind::IdleTimeout,
        "RuntimeLost" => EventKind::RuntimeLost,
        other => panic!("unknown event `{other}` in table"),
    }
}

/// Every (state, event) cell of [`TABLE`] with its expected target.
pub fn expected() -> Vec<(SessionState, EventKind, Option<SessionState>)> {
    let mut lines = TABLE.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<EventKind> = lines
        .next()
        .expect("header row")
        .split_whitespace()
        .skip(1)
        .map(event_named)
        .collect();
    let mut cells = Vec::new();
    for line in lines {
        let mut cols = line.split_whitespace();
        let from = state_named(cols.next().expect("state column"));
        let targets: Vec<&str> = cols.collect();
        assert_eq!(targets.len(), header.len(), "row `{line}` has the wrong width");
        for (event, target) in header.iter().zip(targets) {
            let to = (target != "-").then(|| state_named(target));
            cells.push((from, *event, to));
        }
    }
    cells
}
