#![allow(dead_code)]

pub mod oracle;
pub mod scenarios;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use everhub::api::{Hub, HubConfig, HubDeps};
use everhub::auth::{StaticProvider, TokenSigner};
use everhub::clock::now_millis;
use everhub::repo::LocalFetcher;
use everhub::runtime::sim::SimRuntime;
use everhub::runtime::RuntimeEndpoint;
use everhub::session::{self, JournalRecord, ReplayIssue};
use reqwest::{Method, StatusCode};
use serde_json::Value;

/// URL the canonical fixture is served under.
pub const REPO_URL: &str = "https://github.com/lab/analysis";
/// URL of a repository with no Dockerfile.
pub const NO_ENV_URL: &str = "https://github.com/lab/notes";
pub const FIXTURE_COMMIT: &str = "0123456789abcdef0123456789abcdef01234567";

/// Dockerfile, README, one notebook, Makefile and CI config.
pub const CANONICAL_LAYOUT: &[(&str, &str)] = &[
    ("Dockerfile", "FROM python:3.11-slim\nCMD [\"python\", \"-m\", \"http.server\", \"8888\"]\n"),
    ("README.md", "# analysis\n\nReproduces figure 2.\n"),
    ("analysis.ipynb", "{\"cells\": [], \"nbformat\": 4, \"nbformat_minor\": 5}\n"),
    ("Makefile", "all:\n\tjupyter nbconvert --execute analysis.ipynb\n"),
    ("circle.yml", "test:\n  override:\n    - make\n"),
];

pub fn write_tree(root: &Path, files: &[(&str, &str)]) {
    for (rel, content) in files {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).unwrap();
        }
        std::fs::write(path, content).unwrap();
    }
}

pub fn git(dir: &Path, args: &[&str]) -> String {
    let out = Command::new("git")
        .args(args)
        .current_dir(dir)
        .env("GIT_AUTHOR_NAME", "fixture")
        .env("GIT_AUTHOR_EMAIL", "fixture@example.com")
        .env("GIT_COMMITTER_NAME", "fixture")
        .env("GIT_COMMITTER_EMAIL", "fixture@example.com")
        .output()
        .expect("git is installed");
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

/// A git repository holding `files` in one commit. Returns its head commit.
pub fn git_repo(files: &[(&str, &str)]) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    git(dir.path(), &["init", "--quiet", "-b", "main"]);
    write_tree(dir.path(), files);
    git(dir.path(), &["add", "-A"]);
    git(dir.path(), &["commit", "--quiet", "--allow-empty", "-m", "fixture"]);
    let head = git(dir.path(), &["rev-parse", "HEAD"]);
    (dir, head)
}

/// `file://` URL of a local directory.
pub fn file_url(dir: &Path) -> String {
    format!("file://{}", dir.display())
}

pub fn fixture_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), CANONICAL_LAYOUT);
    dir
}

pub fn sim_endpoint() -> RuntimeEndpoint {
    HubConfig::for_testing("/unused", "/unused").default_endpoint().unwrap()
}

pub const ADMIN: &str = "root-admin";

/// A hub on an ephemeral port, backed by the simulated runtime and a local
/// copy of the canonical fixture.
pub struct TestHub {
    pub hub: Option<Hub>,
    pub sim: Arc<SimRuntime>,
    pub config: HubConfig,
    pub deps: HubDeps,
    pub state_dir: tempfile::TempDir,
    pub fixture: tempfile::TempDir,
    pub no_env_fixture: tempfile::TempDir,
    pub client: reqwest::Client,
    signer: TokenSigner,
}

impl TestHub {
    pub async fn start() -> TestHub {
        Self::start_with(|_| {}).await
    }

    pub async fn start_with(tweak: impl FnOnce(&mut HubConfig)) -> TestHub {
        let state_dir = tempfile::tempdir().unwrap();
        let fixture = fixture_dir();
        let mut config = HubConfig::for_testing(state_dir.path().join("journal.ndjson"), state_dir.path().join("work"));
        config.admins = vec![ADMIN.to_string()];
        config.maintenance_interval_seconds = 3600;
        tweak(&mut config);
        let no_env_fixture = tempfile::tempdir().unwrap();
        write_tree(no_env_fixture.path(), &[("README.md", "# notes\n"), ("notes.ipynb", "{}")]);
        let sim = Arc::new(SimRuntime::with_backends());
        let fetcher = LocalFetcher::new()
            .with_repo(NO_ENV_URL, no_env_fixture.path(), "fedcba9876543210fedcba9876543210fedcba98")
            .with_repo(REPO_URL, fixture.path(), FIXTURE_COMMIT)
            .with_ref(REPO_URL, "v1", "89abcdef0123456789abcdef0123456789abcdef");
        let deps = HubDeps {
            driver: sim.clone(),
            fetcher: Arc::new(fetcher),
            provider: Arc::new(StaticProvider::new().with_logins(["alice", "bob", ADMIN])),
        };
        let hub = Hub::start(config.clone(), deps.clone()).await.expect("hub starts");
        let signer = TokenSigner::new(config.secret_key.as_bytes().to_vec());
        TestHub {
            hub: Some(hub),
            sim,
            config,
            deps,
            state_dir,
            fixture,
            no_env_fixture,
            client: reqwest::Client::builder()
                .redirect(reqwest::redirect::Policy::none())
                .build()
                .unwrap(),
            signer,
        }
    }

    pub fn hub(&self) -> &Hub {
        self.hub.as_ref().expect("hub running")
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.hub().base_url())
    }

    pub fn journal_path(&self) -> PathBuf {
        self.config.journal_path.clone()
    }

    pub fn token(&self, login: &str) -> String {
        self.signer.mint(login, now_millis(), 3_600_000).encode()
    }

    pub fn request(&self, method: Method, path: &str, login: Option<&str>) -> reqwest::RequestBuilder {
        let mut rb = self.client.request(method, self.url(path));
        if let Some(l) = login {
            rb = rb.bearer_auth(self.token(l));
        }
        rb
    }

    /// Sends a JSON API call and returns the status and parsed body
    /// (`Value::Null` for an empty or non-JSON body).
    pub async fn api(&self, method: Method, path: &str, login: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut rb = self.request(method, path, login);
        if let Some(b) = body {
            rb = rb.json(&b);
        }
        let resp = rb.send().await.expect("request sent");
        let status = resp.status();
        let bytes = resp.bytes().await.unwrap_or_default();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    pub async fn launch(&self, login: &str) -> (StatusCode, Value) {
        self.launch_url(login, REPO_URL).await
    }

    pub async fn launch_url(&self, login: &str, url: &str) -> (StatusCode, Value) {
        self.api(Method::POST, "/api/sessions", Some(login), Some(serde_json::json!({ "repo_url": url })))
            .await
    }

    /// Polls the session until `done(state)` holds or `timeout` passes.
    pub async fn wait_for(&self, login: &str, id: &str, timeout: Duration, done: impl Fn(&str) -> bool) -> Value {
        let deadline = Instant::now() + timeout;
        loop {
            let (status, body) = self.api(Method::GET, &format!("/api/sessions/{id}"), Some(login), None).await;
            assert_eq!(status, StatusCode::OK, "{body}");
            let state = body["state"].as_str().unwrap_or_default().to_string();
            if done(&state) || Instant::now() >= deadline {
                return body;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Abrupt stop followed by a fresh hub on the same journal and runtime.
    pub async fn kill_and_restart(&mut self) {
        if let Some(h) = self.hub.take() {
            h.kill();
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
        let hub = Hub::start(self.config.clone(), self.deps.clone()).await.expect("hub restarts");
        self.hub = Some(hub);
    }

    /// Graceful stop, then a replay audit of the journal this hub wrote.
    pub async fn shutdown(mut self, label: &str) -> JournalAudit {
        if let Some(h) = self.hub.take() {
            h.shutdown(Duration::from_secs(5)).await.unwrap();
        }
        audit_journal(label, &self.config.journal_path)
    }
}

#[derive(Debug, Clone)]
pub struct JournalAudit {
    pub label: String,
    pub records: usize,
    pub issues: Vec<String>,
    pub entries: Vec<JournalRecord>,
}

static AUDITS: Mutex<Vec<JournalAudit>> = Mutex::new(Vec::new());

/// Replays the journal at `path`, records the result for later inspection
/// and returns it.
pub fn audit_journal(label: &str, path: &Path) -> JournalAudit {
    let records = session::load(path).expect("journal readable");
    let issues: Vec<ReplayIssue> = session::replay(&records).1;
    let audit = JournalAudit {
        label: label.to_string(),
        records: records.len(),
        issues: issues.iter().map(ToString::to_string).collect(),
        entries: records,
    };
    AUDITS.lock().unwrap().push(audit.clone());
    audit
}

/// Every journal audited so far in this test process.
pub fn journal_audits() -> Vec<JournalAudit> {
    AUDITS.lock().unwrap().clone()
}

/// Polls `cond` every 10 ms until true or `timeout` passes.
pub async fn eventually(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}
