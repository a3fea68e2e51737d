//! One function per acceptance criterion. Each returns `Ok(detail)` when the
//! criterion holds and `Err(reason)` otherwise; the focused test files and
//! the acceptance runner share them.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::extract::{ConnectInfo, Request};
use futures_util::{SinkExt, StreamExt};
use http::HeaderMap;
use rand::{Rng, SeedableRng};
use reqwest::{Method, StatusCode};
use serde_json::Value;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;

use everhub::builder::BuildRegistry;
use everhub::clock::now_millis;
use everhub::proxy::{AccessPolicy, ActivitySink, Proxy, ProxyConfig, RouteTable, RouteTarget};
use everhub::repo::{self, fetch_repository, inspect_manifest, Checkout, GitFetcher, RepoManifest};
use everhub::runtime::sim::{BuildScript, SimRuntime};
use everhub::runtime::{RuntimeEndpoint, SESSION_LABEL, USER_LABEL};
use everhub::session::{transition, EventKind, JournalRecord, SessionState};

use super::{audit_journal, eventually, git_repo, journal_audits, oracle, sim_endpoint, write_tree, TestHub};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Wall-clock budget for a launch to reach Running.
pub const LAUNCH_BUDGET: Duration = Duration::from_secs(5);
/// Budget for a stop to converge to Stopped.
pub const STOP_BUDGET: Duration = Duration::from_secs(5);

fn is_settled(state: &str) -> bool {
    matches!(state, "Running" | "Stopped" | "Failed")
}

fn id_of(body: &Value) -> Result<String, String> {
    body["id"].as_str().map(String::from).ok_or_else(|| format!("no id in {body}"))
}

fn running_routes(th: &TestHub) -> (BTreeSet<String>, BTreeSet<String>) {
    let routes: BTreeSet<String> = th.hub().manager().routes().snapshot().into_keys().collect();
    let running: BTreeSet<String> = th
        .hub()
        .manager()
        .list(None)
        .into_iter()
        .filter(|s| s.state == SessionState::Running)
        .map(|s| s.route_path)
        .collect();
    (routes, running)
}

// ---------------------------------------------------------------- launch

pub async fn end_to_end() -> Check {
    let th = TestHub::start().await;
    let started = Instant::now();
    let (status, body) = th.launch("alice").await;
    ensure!(status == StatusCode::ACCEPTED, "launch returned {status}: {body}");
    let id = id_of(&body)?;
    ensure!(body["state"] == "Pending", "new session reported state {}", body["state"]);

    let session = th.wait_for("alice", &id, LAUNCH_BUDGET, is_settled).await;
    let elapsed = started.elapsed();
    ensure!(session["state"] == "Running", "session settled in {}: {session}", session["state"]);
    ensure!(elapsed <= LAUNCH_BUDGET, "Running after {elapsed:?}, budget {LAUNCH_BUDGET:?}");
    ensure!(
        session["repo"]["resolved_commit"] == super::FIXTURE_COMMIT,
        "commit not pinned: {}",
        session["repo"]["resolved_commit"]
    );
    let container = session["container"]["container_id"].as_str().unwrap_or_default().to_string();
    let route = session["route_path"].as_str().unwrap_or_default().to_string();
    ensure!(route == format!("/user/alice/{id}/"), "unexpected route {route}");

    let (routes, running) = running_routes(&th);
    ensure!(routes == running, "routes {routes:?} differ from running set {running:?}");

    let resp = th
        .request(Method::GET, &format!("{route}tree/analysis.ipynb?kernel=1"), Some("alice"))
        .send()
        .await
        .map_err(|e| e.to_string())?;
    let status = resp.status();
    let text = resp.text().await.unwrap_or_default();
    let expected = format!("sim backend {container}: GET {route}tree/analysis.ipynb");
    ensure!(status == StatusCode::OK && text == expected, "proxied {status} `{text}`, wanted `{expected}`");

    let (listed_status, listed) = th.api(Method::GET, "/api/sessions", Some("alice"), None).await;
    ensure!(listed_status == StatusCode::OK, "list returned {listed_status}");
    ensure!(
        listed.as_array().is_some_and(|a| a.len() == 1 && a[0]["id"] == id.as_str()),
        "listing does not show the session: {listed}"
    );

    let stop_started = Instant::now();
    let (status, body) = th.api(Method::DELETE, &format!("/api/sessions/{id}"), Some("alice"), None).await;
    ensure!(status == StatusCode::ACCEPTED, "delete returned {status}: {body}");
    let stopped = th
        .wait_for("alice", &id, STOP_BUDGET, |s| s == "Stopped" || s == "Failed")
        .await;
    ensure!(stopped["state"] == "Stopped", "stop converged to {}", stopped["state"]);
    ensure!(
        th.sim.containers(&sim_endpoint().label).is_empty(),
        "containers left after stop: {:?}",
        th.sim.containers(&sim_endpoint().label)
    );
    let (routes, running) = running_routes(&th);
    ensure!(routes.is_empty() && running.is_empty(), "routes left after stop: {routes:?}");
    let after = th.request(Method::GET, &route, Some("alice")).send().await.map_err(|e| e.to_string())?;
    ensure!(after.status() == StatusCode::NOT_FOUND, "stopped route answered {}", after.status());

    let stop_elapsed = stop_started.elapsed();
    let audit = th.shutdown("end_to_end").await;
    ensure!(audit.issues.is_empty(), "journal replay issues: {:?}", audit.issues);
    let visited: Vec<SessionState> = audit
        .entries
        .iter()
        .filter_map(|r| match r {
            JournalRecord::Event(e) if e.session == id => Some(e.state),
            _ => None,
        })
        .collect();
    use SessionState::*;
    ensure!(
        visited == [Cloning, Building, Spawning, Running, Stopping, Stopped],
        "journaled states {visited:?}"
    );
    Ok(format!("Running in {elapsed:.2?}, Stopped in {stop_elapsed:.2?}"))
}

// ---------------------------------------------------------- state machine

pub fn state_machine_table() -> Check {
    let cells = oracle::expected();
    ensure!(cells.len() == 8 * 12, "oracle has {} cells, expected 96", cells.len());
    let mut mismatches = Vec::new();
    for (state, event, want) in &cells {
        let got = transition(*state, *event).ok();
        if got != *want {
            mismatches.push(format!("{state}+{event}: got {got:?}, table says {want:?}"));
        }
    }
    let pairs: BTreeSet<(String, String)> = SessionState::ALL
        .iter()
        .flat_map(|s| EventKind::ALL.iter().map(move |e| (s.to_string(), e.to_string())))
        .collect();
    let covered: BTreeSet<(String, String)> = cells.iter().map(|(s, e, _)| (s.to_string(), e.to_string())).collect();
    ensure!(pairs == covered, "oracle does not cover every pair");
    ensure!(mismatches.is_empty(), "{} mismatches: {}", mismatches.len(), mismatches.join("; "));
    let legal = cells.iter().filter(|c| c.2.is_some()).count();
    Ok(format!("96 pairs agree ({legal} legal)"))
}

/// Every journal audited so far in this process replays without issues.
pub fn journals_replay_cleanly(min_journals: usize) -> Check {
    let audits = journal_audits();
    ensure!(
        audits.len() >= min_journals,
        "only {} journals audited, expected at least {min_journals}",
        audits.len()
    );
    let bad: Vec<String> = audits
        .iter()
        .filter(|a| !a.issues.is_empty())
        .map(|a| format!("{}: {:?}", a.label, a.issues))
        .collect();
    ensure!(bad.is_empty(), "replay issues: {}", bad.join("; "));
    let records: usize = audits.iter().map(|a| a.records).sum();
    Ok(format!("{} journals, {records} records, no illegal transitions", audits.len()))
}

// --------------------------------------------------------------- manifest

pub struct ManifestFixture {
    pub name: &'static str,
    pub files: &'static [(&'static str, &'static str)],
    pub expected: fn() -> RepoManifest,
}

pub fn manifest_fixtures() -> Vec<ManifestFixture> {
    fn paths(p: &[&str]) -> Vec<String> {
        p.iter().map(|s| s.to_string()).collect()
    }
    vec![
        ManifestFixture {
            name: "full",
            files: super::CANONICAL_LAYOUT,
            expected: || RepoManifest {
                has_dockerfile: true,
                has_readme: true,
                notebook_paths: paths(&["analysis.ipynb"]),
                workflow_path: Some("Makefile".into()),
                ci_config_path: Some("circle.yml".into()),
                launchable: true,
            },
        },
        ManifestFixture {
            name: "no-dockerfile",
            files: &[
                ("README.md", "# no env\n"),
                ("analysis.ipynb", "{}"),
                ("Makefile", "all:\n"),
                ("circle.yml", "test: {}\n"),
            ],
            expected: || RepoManifest {
                has_dockerfile: false,
                has_readme: true,
                notebook_paths: paths(&["analysis.ipynb"]),
                workflow_path: Some("Makefile".into()),
                ci_config_path: Some("circle.yml".into()),
                launchable: false,
            },
        },
        ManifestFixture {
            name: "lowercase-dockerfile",
            files: &[("dockerfile", "FROM scratch\n"), ("Readme", "plain\n"), ("docker/Dockerfile", "FROM scratch\n")],
            expected: || RepoManifest {
                has_dockerfile: false,
                has_readme: true,
                notebook_paths: vec![],
                workflow_path: None,
                ci_config_path: None,
                launchable: false,
            },
        },
        ManifestFixture {
            name: "nested-notebooks",
            files: &[
                ("Dockerfile", "FROM scratch\n"),
                ("top.ipynb", "{}"),
                ("notebooks/b.ipynb", "{}"),
                ("notebooks/a.ipynb", "{}"),
                ("notebooks/deep/er/c.ipynb", "{}"),
                ("notebooks/.ipynb_checkpoints/a-checkpoint.ipynb", "{}"),
                (".ipynb_checkpoints/top-checkpoint.ipynb", "{}"),
                ("notes.txt", "not a notebook"),
                ("Snakefile", "rule all:\n"),
            ],
            expected: || RepoManifest {
                has_dockerfile: true,
                has_readme: false,
                notebook_paths: paths(&[
                    "notebooks/a.ipynb",
                    "notebooks/b.ipynb",
                    "notebooks/deep/er/c.ipynb",
                    "top.ipynb",
                ]),
                workflow_path: Some("Snakefile".into()),
                ci_config_path: None,
                launchable: true,
            },
        },
        ManifestFixture {
            name: "shell-workflow",
            files: &[
                ("Dockerfile", "FROM scratch\n"),
                ("README.rst", "docs\n"),
                ("run_all.sh", "#!/bin/sh\n"),
                ("build.sh", "#!/bin/sh\n"),
                ("scripts/aaa.sh", "#!/bin/sh\n"),
                (".travis.yml", "script: ./build.sh\n"),
            ],
            expected: || RepoManifest {
                has_dockerfile: true,
                has_readme: true,
                notebook_paths: vec![],
                workflow_path: Some("build.sh".into()),
                ci_config_path: Some(".travis.yml".into()),
                launchable: true,
            },
        },
        ManifestFixture {
            name: "empty",
            files: &[],
            expected: RepoManifest::default,
        },
    ]
}

/// Runs the manifest fixtures through `git` fetch + inspection and through
/// the `check-repo` binary at `bin`.
pub fn manifest_conformance(bin: &Path) -> Check {
    let parent = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let prefix = "https://example.org/fixtures/";
    let replacement = format!("file://{}/", parent.path().display());
    let fetcher = GitFetcher::default().with_rewrite(prefix, replacement.clone());
    let mut report = Vec::new();
    for fx in manifest_fixtures() {
        let (repo_dir, head) = git_repo(fx.files);
        std::fs::rename(repo_dir.path(), parent.path().join(fx.name)).map_err(|e| e.to_string())?;
        std::mem::forget(repo_dir);
        let url = format!("{prefix}{}", fx.name);
        let repo_ref = repo::parse_repo_url(&url).map_err(|e| e.to_string())?;
        let manifest = match fetch_repository(&fetcher, &repo_ref, work.path()) {
            Ok(checkout) => {
                ensure!(
                    checkout.repo.resolved_commit == head,
                    "{}: pinned {} instead of {head}",
                    fx.name,
                    checkout.repo.resolved_commit
                );
                inspect_manifest(&checkout)
            }
            Err(e) => {
                ensure!(fx.files.is_empty(), "{}: fetch failed: {e}", fx.name);
                let empty = tempfile::tempdir().map_err(|e| e.to_string())?;
                inspect_manifest(&Checkout {
                    repo: repo_ref.clone(),
                    root_path: empty.path().to_path_buf(),
                    fetched_at: now_millis(),
                })
            }
        };
        let expected = (fx.expected)();
        ensure!(manifest == expected, "{}: got {manifest:?}, expected {expected:?}", fx.name);

        let out = std::process::Command::new(bin)
            .args(["check-repo", &url, "--rewrite", &format!("{prefix}={replacement}")])
            .output()
            .map_err(|e| e.to_string())?;
        let code = out.status.code().unwrap_or(-1);
        ensure!(
            (code == 0) == expected.launchable,
            "{}: check-repo exited {code} for launchable={}; stderr: {}",
            fx.name,
            expected.launchable,
            String::from_utf8_lossy(&out.stderr)
        );
        report.push(format!("{}={code}", fx.name));
    }
    Ok(format!("6 fixtures match; check-repo exits {}", report.join(" ")))
}

// ------------------------------------------------------------------ proxy

/// Credentials are `Bearer <login>`; nobody is admin.
struct NamePolicy;

impl AccessPolicy for NamePolicy {
    fn authenticate(&self, headers: &HeaderMap) -> Option<String> {
        let v = headers.get(http::header::AUTHORIZATION)?.to_str().ok()?;
        v.strip_prefix("Bearer ").filter(|l| !l.is_empty()).map(String::from)
    }

    fn is_admin(&self, _login: &str) -> bool {
        false
    }
}

struct NoActivity;

impl ActivitySink for NoActivity {
    fn touch(&self, _session_id: &str) {}
}

/// Echoes method, path and body back verbatim.
async fn spawn_echo_backend() -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = axum::Router::new().fallback(|req: Request| async move {
        if req.uri().path().ends_with("/headers") {
            let headers: BTreeMap<String, String> = req
                .headers()
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or_default().to_string()))
                .collect();
            return axum::response::Response::new(Body::from(serde_json::to_vec(&headers).unwrap()));
        }
        let method = req.method().to_string();
        let path = req.uri().path().to_string();
        let body = axum::body::to_bytes(req.into_body(), usize::MAX).await.unwrap_or_default();
        axum::response::Response::builder()
            .header("x-echo-method", method)
            .header("x-echo-path", path)
            .body(Body::from(body))
            .unwrap()
    });
    tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    addr
}

/// Accepts WebSocket handshakes on any path and echoes every data frame.
async fn spawn_ws_echo_backend() -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        while let Ok((stream, _)) = listener.accept().await {
            tokio::spawn(async move {
                let Ok(mut ws) = tokio_tungstenite::accept_async(stream).await else {
                    return;
                };
                while let Some(Ok(msg)) = ws.next().await {
                    match msg {
                        Message::Text(_) | Message::Binary(_) => {
                            if ws.send(msg).await.is_err() {
                                return;
                            }
                        }
                        Message::Close(_) => return,
                        _ => {}
                    }
                }
            });
        }
    });
    addr
}

/// An address nothing listens on.
async fn dead_address() -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    listener.local_addr().unwrap()
}

pub struct ProxyRig {
    pub base: String,
    pub ws_base: String,
    pub routes: Arc<RouteTable>,
}

pub const ECHO_ROUTE: &str = "/user/alice/echo0001/";
pub const WS_ROUTE: &str = "/user/alice/wsecho01/";
pub const DEAD_ROUTE: &str = "/user/alice/dead0001/";
pub const BOB_ROUTE: &str = "/user/bob/bobs0001/";

/// A proxy behind an HTTP server with an echo, a WebSocket echo, an
/// unreachable and a foreign route registered.
pub async fn proxy_rig() -> ProxyRig {
    let routes = Arc::new(RouteTable::new());
    let echo = spawn_echo_backend().await;
    let ws = spawn_ws_echo_backend().await;
    let dead = dead_address().await;
    for (path, backend, owner, sid) in [
        (ECHO_ROUTE, echo, "alice", "echo0001"),
        (WS_ROUTE, ws, "alice", "wsecho01"),
        (DEAD_ROUTE, dead, "alice", "dead0001"),
        (BOB_ROUTE, echo, "bob", "bobs0001"),
    ] {
        routes
            .register(
                path,
                RouteTarget {
                    backend: backend.to_string(),
                    session_id: sid.into(),
                    owner: owner.into(),
                },
            )
            .unwrap();
    }
    let proxy = Proxy::new(routes.clone(), Arc::new(NamePolicy), Arc::new(NoActivity), ProxyConfig::default());
    let app = axum::Router::new().fallback(move |ConnectInfo(peer): ConnectInfo<SocketAddr>, req: Request| {
        let proxy = proxy.clone();
        async move { Ok::<_, Infallible>(proxy.handle(req, Some(peer)).await) }
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        let _ = axum::serve(listener, app.into_make_service_with_connect_info::<SocketAddr>()).await;
    });
    ProxyRig {
        base: format!("http://{addr}"),
        ws_base: format!("ws://{addr}"),
        routes,
    }
}

pub const MAX_BODY: usize = 10 * 1024 * 1024;
pub const BODY_CASES: usize = 100;

/// Body sizes: the two extremes, then log-uniform draws in between.
pub fn body_sizes(seed: u64) -> Vec<usize> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut sizes = vec![0, MAX_BODY];
    while sizes.len() < BODY_CASES {
        let exp: f64 = rng.gen_range(0.0..(MAX_BODY as f64).log2());
        sizes.push((2f64.powf(exp) as usize).clamp(1, MAX_BODY));
    }
    sizes
}

pub async fn proxy_bodies(rig: &ProxyRig, seed: u64) -> Check {
    let client = reqwest::Client::new();
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed ^ 0x5eed);
    let sizes = body_sizes(seed);
    let mut total = 0usize;
    for (i, size) in sizes.iter().enumerate() {
        let mut body = vec![0u8; *size];
        rng.fill(&mut body[..]);
        let path = format!("{ECHO_ROUTE}upload/{i}");
        let resp = client
            .post(format!("{}{path}", rig.base))
            .bearer_auth("alice")
            .body(body.clone())
            .send()
            .await
            .map_err(|e| format!("case {i} ({size} bytes): {e}"))?;
        ensure!(resp.status() == StatusCode::OK, "case {i}: status {}", resp.status());
        ensure!(
            resp.headers().get("x-echo-path").and_then(|v| v.to_str().ok()) == Some(path.as_str()),
            "case {i}: path not preserved"
        );
        let got = resp.bytes().await.map_err(|e| e.to_string())?;
        ensure!(got.len() == body.len(), "case {i}: {} bytes back, sent {}", got.len(), body.len());
        ensure!(got[..] == body[..], "case {i}: body differs");
        total += size;
    }
    Ok(format!("{} bodies, {total} bytes, max {}", sizes.len(), sizes.iter().max().unwrap()))
}

pub const WS_FRAMES: usize = 100;

pub async fn proxy_websocket(rig: &ProxyRig) -> Check {
    let mut req = format!("{}{WS_ROUTE}api/kernels/k1/channels", rig.ws_base)
        .into_client_request()
        .map_err(|e| e.to_string())?;
    req.headers_mut()
        .insert(http::header::AUTHORIZATION, "Bearer alice".parse().unwrap());
    let (ws, resp) = tokio_tungstenite::connect_async(req).await.map_err(|e| format!("handshake: {e}"))?;
    ensure!(resp.status() == StatusCode::SWITCHING_PROTOCOLS, "handshake status {}", resp.status());
    let (mut tx, mut rx) = ws.split();
    let sent: Vec<Message> = (0..WS_FRAMES)
        .map(|i| {
            if i % 3 == 0 {
                Message::Binary((0..=(i % 251) as u8).collect::<Vec<u8>>())
            } else {
                Message::Text(format!("frame {i:03} {}", "x".repeat(i)))
            }
        })
        .collect();
    let writer = {
        let frames = sent.clone();
        tokio::spawn(async move {
            for f in frames {
                tx.send(f).await?;
            }
            Ok::<_, tokio_tungstenite::tungstenite::Error>(tx)
        })
    };
    let mut received = Vec::with_capacity(WS_FRAMES);
    while received.len() < WS_FRAMES {
        match tokio::time::timeout(Duration::from_secs(10), rx.next()).await {
            Ok(Some(Ok(m @ (Message::Text(_) | Message::Binary(_))))) => received.push(m),
            Ok(Some(Ok(_))) => {}
            Ok(Some(Err(e))) => return Err(format!("after {} frames: {e}", received.len())),
            Ok(None) => return Err(format!("stream closed after {} frames", received.len())),
            Err(_) => return Err(format!("timed out after {} frames", received.len())),
        }
    }
    let mut tx = writer.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
    let _ = tx.send(Message::Close(None)).await;
    ensure!(received == sent, "frames differ or arrived out of order");
    Ok(format!("{WS_FRAMES} frames echoed in order"))
}

/// 401 without credentials, 403 on a foreign route, 404 with no route,
/// 502 on a dead backend.
pub async fn proxy_statuses(rig: &ProxyRig) -> Check {
    let client = reqwest::Client::new();
    let cases: [(&str, Option<&str>, StatusCode); 5] = [
        (ECHO_ROUTE, None, StatusCode::UNAUTHORIZED),
        (BOB_ROUTE, Some("alice"), StatusCode::FORBIDDEN),
        ("/user/alice/nosuch01/", Some("alice"), StatusCode::NOT_FOUND),
        (DEAD_ROUTE, Some("alice"), StatusCode::BAD_GATEWAY),
        (BOB_ROUTE, Some("bob"), StatusCode::OK),
    ];
    for (path, login, want) in cases {
        let mut rb = client.get(format!("{}{path}", rig.base));
        if let Some(l) = login {
            rb = rb.bearer_auth(l);
        }
        let got = rb.send().await.map_err(|e| e.to_string())?.status();
        ensure!(got == want, "{path} as {login:?}: {got}, expected {want}");
    }
    Ok("401/403/404/502 distinguished".into())
}

pub async fn proxy_fidelity(seed: u64) -> Check {
    let rig = proxy_rig().await;
    let a = proxy_bodies(&rig, seed).await?;
    let b = proxy_websocket(&rig).await?;
    let c = proxy_statuses(&rig).await?;
    Ok(format!("{a}; {b}; {c}"))
}

// --------------------------------------------------------------- recovery

pub async fn recovery() -> Check {
    let mut th = TestHub::start().await;
    let endpoint = sim_endpoint();

    let (_, body) = th.launch("alice").await;
    let running_id = id_of(&body)?;
    let s = th.wait_for("alice", &running_id, LAUNCH_BUDGET, is_settled).await;
    ensure!(s["state"] == "Running", "first session settled in {}", s["state"]);
    let running_container = s["container"]["container_id"].as_str().unwrap_or_default().to_string();

    th.sim.set_default_build(BuildScript::success(["Step 1/2 : FROM scratch", "Step 2/2 : sleep"]).with_line_delay(Duration::from_secs(30)));
    let (_, body) = th.launch("bob").await;
    let building_id = id_of(&body)?;
    let s = th.wait_for("bob", &building_id, LAUNCH_BUDGET, |s| s == "Building").await;
    ensure!(s["state"] == "Building", "second session did not reach Building: {}", s["state"]);

    let mut orphan_labels = BTreeMap::new();
    orphan_labels.insert(SESSION_LABEL.to_string(), "zzzzzzzz".to_string());
    orphan_labels.insert(USER_LABEL.to_string(), "mallory".to_string());
    let orphan = th.sim.insert_container(&endpoint, orphan_labels);
    let foreign = th.sim.insert_container(&endpoint, BTreeMap::new());

    let pre = audit_journal("recovery-before-kill", &th.journal_path());
    ensure!(pre.issues.is_empty(), "journal before kill: {:?}", pre.issues);
    th.kill_and_restart().await;
    let report = th.hub().reconcile_report().clone();

    ensure!(report.restored == vec![running_id.clone()], "restored {:?}", report.restored);
    ensure!(report.failed == vec![building_id.clone()], "failed {:?}", report.failed);
    ensure!(report.orphans_removed == vec![orphan.clone()], "orphans removed {:?}", report.orphans_removed);
    ensure!(
        report.stopped.is_empty() && report.unreachable_endpoints.is_empty() && report.deferred.is_empty(),
        "unexpected report entries: {report:?}"
    );

    let remaining: BTreeSet<String> = th
        .sim
        .containers(&endpoint.label)
        .into_iter()
        .map(|c| c.container_id)
        .collect();
    let want: BTreeSet<String> = [running_container.clone(), foreign.clone()].into();
    ensure!(remaining == want, "containers after reconcile {remaining:?}, expected {want:?}");

    let failed = th.wait_for("bob", &building_id, Duration::from_secs(1), |_| true).await;
    ensure!(
        failed["state"] == "Failed" && failed["failure"]["stage"] == "build",
        "in-flight build ended as {failed}"
    );
    let (routes, running) = running_routes(&th);
    ensure!(routes == running && running.len() == 1, "routes {routes:?} vs running {running:?}");
    let route = format!("/user/alice/{running_id}/");
    let resp = th.request(Method::GET, &format!("{route}lab"), Some("alice")).send().await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let text = resp.text().await.unwrap_or_default();
    ensure!(
        status == StatusCode::OK && text.starts_with(&format!("sim backend {running_container}:")),
        "restored route answered {status} `{text}`"
    );

    let audit = th.shutdown("recovery-after-restart").await;
    ensure!(audit.issues.is_empty(), "journal after restart: {:?}", audit.issues);
    Ok(format!(
        "restored {}, failed {}, removed orphan {}",
        running_id, building_id, orphan
    ))
}

// ----------------------------------------------------- quota and culling

pub const STORM_REQUESTS: usize = 20;

pub async fn quota_storm() -> Check {
    let th = TestHub::start().await;
    let limit = th.config.quota.max_sessions_per_user as usize;
    ensure!(limit == 2, "fixture expects the default per-user limit of 2, got {limit}");
    let results = futures_util::future::join_all((0..STORM_REQUESTS).map(|_| th.launch("alice"))).await;
    let accepted: Vec<String> = results
        .iter()
        .filter(|(s, _)| *s == StatusCode::ACCEPTED)
        .filter_map(|(_, b)| b["id"].as_str().map(String::from))
        .collect();
    let rejected = results.iter().filter(|(s, b)| *s == StatusCode::CONFLICT && b["error"] == "quota_exceeded").count();
    ensure!(
        accepted.len() == limit && rejected == STORM_REQUESTS - limit,
        "{} accepted, {rejected} rejected",
        accepted.len()
    );
    for id in &accepted {
        let s = th.wait_for("alice", id, LAUNCH_BUDGET, is_settled).await;
        ensure!(s["state"] == "Running", "{id} settled in {}", s["state"]);
    }
    let active = th.hub().manager().list(Some("alice")).iter().filter(|s| s.is_active()).count();
    ensure!(active == limit, "{active} non-terminal sessions");
    ensure!(th.hub().manager().list(None).len() == limit, "rejected requests left sessions behind");
    let audit = th.shutdown("quota_storm").await;
    ensure!(audit.issues.is_empty(), "journal: {:?}", audit.issues);
    Ok(format!("{STORM_REQUESTS} concurrent requests, {} non-terminal", accepted.len()))
}

pub async fn idle_culling() -> Check {
    let th = TestHub::start().await;
    let (_, a) = th.launch("alice").await;
    let (_, b) = th.launch("alice").await;
    let (beyond, boundary) = (id_of(&a)?, id_of(&b)?);
    for id in [&beyond, &boundary] {
        let s = th.wait_for("alice", id, LAUNCH_BUDGET, is_settled).await;
        ensure!(s["state"] == "Running", "{id} settled in {}", s["state"]);
    }
    let manager = th.hub().manager();
    let idle_ms = th.config.quota.idle_timeout_seconds as i64 * 1000;
    let anchor = [&beyond, &boundary]
        .iter()
        .filter_map(|id| manager.get(id))
        .map(|s| s.last_activity_at)
        .max()
        .ok_or("sessions vanished")?;
    manager.set_last_activity(&beyond, anchor).map_err(|e| e.to_string())?;
    manager.set_last_activity(&boundary, anchor + 1).map_err(|e| e.to_string())?;
    let now = anchor + idle_ms + 1;
    let culled = manager.cull_idle(now).await;
    ensure!(culled == vec![beyond.clone()], "culled {culled:?}");
    let stopped = th.wait_for("alice", &beyond, STOP_BUDGET, |s| s == "Stopped").await;
    ensure!(stopped["state"] == "Stopped", "culled session ended as {}", stopped["state"]);
    let kept = manager.get(&boundary).ok_or("boundary session vanished")?;
    ensure!(kept.state == SessionState::Running, "boundary session is {}", kept.state);
    let again = manager.cull_idle(now).await;
    ensure!(again.is_empty(), "second pass culled {again:?}");
    let audit = th.shutdown("idle_culling").await;
    ensure!(audit.issues.is_empty(), "journal: {:?}", audit.issues);
    Ok(format!("idle {}ms+1 culled, idle {}ms kept", idle_ms, idle_ms))
}

pub async fn quota_and_culling() -> Check {
    let a = quota_storm().await?;
    let b = idle_culling().await?;
    Ok(format!("{a}; {b}"))
}

// ------------------------------------------------------------------- logs

pub fn scripted_lines(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match i % 7 {
            3 => String::new(),
            5 => format!("Step {i}: ünïcödé ✓ {i}"),
            _ => format!("line {i:04} {}", "=".repeat(i % 40)),
        })
        .collect()
}

/// Follows a job's log from index 0 until it reports terminal, checking
/// index contiguity, and returns the concatenated text.
async fn follow(registry: Arc<BuildRegistry>, job: String, pause: Duration) -> Result<Vec<String>, String> {
    let mut from = 0u64;
    let mut out = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        ensure!(Instant::now() < deadline, "reader timed out at index {from}");
        let batch = match registry.tail_log(&job, from) {
            Ok(b) => b,
            Err(_) => {
                tokio::time::sleep(Duration::from_millis(1)).await;
                continue;
            }
        };
        for line in &batch.lines {
            ensure!(line.index == from, "expected index {from}, got {}", line.index);
            out.push(line.text.clone());
            from += 1;
        }
        ensure!(batch.next_index == from, "next_index {} after reading up to {from}", batch.next_index);
        if batch.terminal {
            let after = registry.tail_log(&job, from).map_err(|e| e.to_string())?;
            ensure!(after.lines.is_empty(), "lines appeared after the terminal batch");
            return Ok(out);
        }
        tokio::time::sleep(pause).await;
    }
}

pub async fn log_integrity_for(n: usize) -> Check {
    let sim = SimRuntime::new();
    let endpoint = RuntimeEndpoint::parse("/sim.sock", false, "logs").unwrap();
    let tag = format!("everhub/logs:n{n}");
    let lines = scripted_lines(n);
    sim.script_build(&tag, BuildScript::success(lines.clone()).with_line_delay(Duration::from_micros(500)));
    let checkout = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_tree(checkout.path(), &[("Dockerfile", "FROM scratch\n")]);
    let registry = Arc::new(BuildRegistry::default());
    let job = format!("job{n}");
    let readers: Vec<_> = [Duration::ZERO, Duration::from_millis(1), Duration::from_millis(7)]
        .into_iter()
        .map(|pause| tokio::spawn(follow(registry.clone(), job.clone(), pause)))
        .collect();
    let built = everhub::builder::run_build(
        &registry,
        &sim,
        &job,
        "sess0001",
        checkout.path(),
        &endpoint,
        &tag,
        Duration::from_secs(60),
    )
    .await;
    ensure!(built.as_deref() == Ok(tag.as_str()), "build failed: {built:?}");
    for (i, r) in readers.into_iter().enumerate() {
        let got = r.await.map_err(|e| e.to_string())??;
        ensure!(got == lines, "reader {i}: {} lines differ from the {} scripted", got.len(), lines.len());
    }
    Ok(format!("{n} lines"))
}

pub async fn log_integrity() -> Check {
    let mut parts = Vec::new();
    for n in [0, 1, 1000] {
        parts.push(log_integrity_for(n).await?);
    }
    Ok(format!("{} reproduced by 3 concurrent readers each", parts.join(", ")))
}

// ------------------------------------------------------------------ smoke

pub const SMOKE_ENV: &str = "EVERHUB_DOCKER_SMOKE";

/// Builds a one-line Dockerfile on the local Docker daemon, starts it, and
/// fetches a page through the proxy. `None` when not enabled.
pub async fn docker_smoke() -> Option<Check> {
    if std::env::var(SMOKE_ENV).ok().as_deref() != Some("1") {
        return None;
    }
    Some(docker_smoke_inner().await)
}

async fn docker_smoke_inner() -> Check {
    use everhub::runtime::docker::DockerDriver;
    use everhub::runtime::{ContainerSpec, ContainerStatus, RuntimeDriver};

    let image = std::env::var("EVERHUB_SMOKE_IMAGE").unwrap_or_else(|_| "hashicorp/http-echo".into());
    let port: u16 = std::env::var("EVERHUB_SMOKE_PORT")
        .ok()
        .and_then(|p| p.parse().ok())
        .unwrap_or(5678);
    let driver = DockerDriver::default();
    let endpoint = RuntimeEndpoint::local_default();
    driver.ping(&endpoint).await.map_err(|e| format!("ping: {e}"))?;
    let checkout = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_tree(checkout.path(), &[("Dockerfile", &format!("FROM {image}\n"))]);
    let tag = "everhub/smoke:latest";
    let registry = BuildRegistry::default();
    everhub::builder::run_build(&registry, &driver, "smoke", "smoke001", checkout.path(), &endpoint, tag, Duration::from_secs(600))
        .await
        .map_err(|e| format!("build: {e}"))?;
    let spec = ContainerSpec::for_session(tag, port, "smoke001");
    let handle = driver.create_and_start(&endpoint, &spec).await.map_err(|e| format!("start: {e}"))?;

    let routes = Arc::new(RouteTable::new());
    let route = "/user/smoke/smoke001/";
    routes
        .register(
            route,
            RouteTarget {
                backend: handle.host_address.clone(),
                session_id: "smoke001".into(),
                owner: "smoke".into(),
            },
        )
        .map_err(|e| e.to_string())?;
    let proxy = Proxy::new(routes, Arc::new(NamePolicy), Arc::new(NoActivity), ProxyConfig::default());
    let mut status = StatusCode::BAD_GATEWAY;
    for _ in 0..50 {
        let req = http::Request::get(route)
            .header(http::header::AUTHORIZATION, "Bearer smoke")
            .body(Body::empty())
            .unwrap();
        status = proxy.handle(req, None).await.status();
        if status == StatusCode::OK {
            break;
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
    let stop = driver.stop_and_remove(&handle, 5).await;
    let gone = driver.inspect(&handle).await.map(|h| h.status);
    ensure!(status == StatusCode::OK, "proxied status {status}");
    stop.map_err(|e| format!("stop: {e}"))?;
    ensure!(gone == Ok(ContainerStatus::Missing), "container after removal: {gone:?}");
    Ok(format!("{image} built, served 200 on port {port}, removed"))
}

/// Polls until the sim has `n` containers on `label`.
pub async fn wait_containers(sim: &SimRuntime, label: &str, n: usize) -> bool {
    eventually(Duration::from_secs(5), || sim.containers(label).len() == n).await
}
