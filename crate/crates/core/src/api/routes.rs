use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{ConnectInfo, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{any, get};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::HubConfig;
use crate::auth::{extract_token, Authenticator, AuthError, TOKEN_COOKIE};
use crate::builder::LogBatch;
use crate::clock::now_millis;
use crate::proxy::{AccessPolicy, Proxy};
use crate::runtime::RuntimeEndpoint;
use crate::session::{Session, SessionError, SessionManager, SessionState, StopOutcome};

/// Longest a log request may wait for new lines.
pub const MAX_LOG_WAIT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub struct AppState {
    pub manager: SessionManager,
    pub auth: Arc<Authenticator>,
    pub proxy: Proxy,
    pub config: Arc<HubConfig>,
}

/// Token-based identity and the configured admin set.
pub struct HubPolicy {
    pub auth: Arc<Authenticator>,
    pub admins: BTreeSet<String>,
}

impl AccessPolicy for HubPolicy {
    fn authenticate(&self, headers: &HeaderMap) -> Option<String> {
        let raw = extract_token(headers)?;
        self.auth.verify_token(&raw, now_millis()).ok().map(|i| i.login)
    }

    fn is_admin(&self, login: &str) -> bool {
        self.admins.contains(login)
    }
}

/// JSON error body `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub extra: Option<(&'static str, Value)>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            extra: None,
        }
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "a valid hub token is required")
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} not found"))
    }

    fn forbidden(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", msg)
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some((k, v)) = self.extra {
            body[k] = v;
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match &e {
            SessionError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            SessionError::Forbidden(_) => ApiError::forbidden(e.to_string()),
            SessionError::QuotaExceeded { .. } => ApiError::new(StatusCode::CONFLICT, "quota_exceeded", e.to_string()),
            SessionError::MalformedUrl(_) => ApiError::new(StatusCode::BAD_REQUEST, "malformed_url", e.to_string()),
        }
    }
}

/// The authenticated caller of an API request.
#[derive(Debug, Clone)]
pub struct Caller {
    pub login: String,
    pub admin: bool,
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let raw = extract_token(&parts.headers).ok_or_else(ApiError::unauthorized)?;
        let identity = state
            .auth
            .verify_token(&raw, now_millis())
            .map_err(|_| ApiError::unauthorized())?;
        let admin = state.config.admins.contains(&identity.login);
        Ok(Caller {
            login: identity.login,
            admin,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub user_login: String,
    pub repo: String,
    pub state: SessionState,
    pub route_path: String,
    pub created_at: i64,
    pub last_activity_at: i64,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        SessionSummary {
            id: s.id.clone(),
            user_login: s.user_login.clone(),
            repo: s.repo.canonical_url.clone(),
            state: s.state,
            route_path: s.route_path.clone(),
            created_at: s.created_at,
            last_activity_at: s.last_activity_at,
        }
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/whoami", get(whoami))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/logs", get(session_logs))
        .route("/users/{login}/byor", get(get_byor).put(put_byor))
        .fallback(api_fallback)
        .method_not_allowed_fallback(api_method_not_allowed);

    let mut app = Router::new()
        .route("/hub/health", get(health))
        .route("/hub/login", get(login))
        .route("/hub/oauth_callback", get(oauth_callback))
        .route("/hub/logout", get(logout))
        .nest("/api", api)
        .route("/api", any(api_fallback))
        .route("/user", any(proxy))
        .route("/user/", any(proxy))
        .route("/user/{*rest}", any(proxy));
    app = match &state.config.ui_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app.route("/", get(index)),
    };
    app.with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn index() -> Response {
    (
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        "<!doctype html><title>everhub</title><h1>everhub</h1>\
         <p><a href=\"/hub/login\">Log in</a> to launch repositories.</p>\n",
    )
        .into_response()
}

#[derive(Deserialize)]
struct LoginQuery {
    next: Option<String>,
}

fn safe_redirect(next: Option<&str>) -> String {
    match next {
        Some(n) if n.starts_with('/') && !n.starts_with("//") && !n.contains('\\') => n.to_string(),
        _ => "/".to_string(),
    }
}

fn redirect(location: &str) -> Response {
    let mut resp = StatusCode::FOUND.into_response();
    if let Ok(v) = HeaderValue::from_str(location) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    resp
}

async fn login(State(st): State<AppState>, Query(q): Query<LoginQuery>) -> Response {
    let start = st.auth.begin_login(&safe_redirect(q.next.as_deref()));
    redirect(&start.authorize_url)
}

#[derive(Deserialize)]
struct CallbackQuery {
    code: Option<String>,
    state: Option<String>,
    error: Option<String>,
}

fn cookie(config: &HubConfig, value: &str, max_age_secs: i64) -> HeaderValue {
    let secure = if config.secure_cookies() { "; Secure" } else { "" };
    HeaderValue::from_str(&format!(
        "{TOKEN_COOKIE}={value}; Path=/; HttpOnly; SameSite=Lax; Max-Age={max_age_secs}{secure}"
    ))
    .expect("cookie value is ascii")
}

async fn oauth_callback(State(st): State<AppState>, Query(q): Query<CallbackQuery>) -> Result<Response, ApiError> {
    if let Some(err) = q.error {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "provider_error", err));
    }
    let (Some(code), Some(nonce)) = (q.code, q.state) else {
        return Err(ApiError::bad_request("code and state are required"));
    };
    let done = st.auth.complete_login(&code, &nonce).await.map_err(|e| match e {
        AuthError::BadState => ApiError::new(StatusCode::BAD_REQUEST, "bad_state", e.to_string()),
        AuthError::ExchangeFailed(_) => ApiError::new(StatusCode::BAD_GATEWAY, "exchange_failed", e.to_string()),
        AuthError::InvalidLogin(_) => ApiError::new(StatusCode::BAD_GATEWAY, "invalid_login", e.to_string()),
        AuthError::NotAllowed(_) => ApiError::forbidden(e.to_string()),
    })?;
    let mut resp = redirect(&done.redirect_after);
    let max_age = (done.token.expires_at - done.token.issued_at) / 1000;
    resp.headers_mut()
        .insert(header::SET_COOKIE, cookie(&st.config, &done.token.encode(), max_age));
    Ok(resp)
}

async fn logout(State(st): State<AppState>) -> Response {
    let mut resp = redirect("/");
    resp.headers_mut().insert(header::SET_COOKIE, cookie(&st.config, "", 0));
    resp
}

async fn whoami(State(st): State<AppState>, caller: Caller) -> Json<Value> {
    Json(json!({
        "login": caller.login,
        "admin": caller.admin,
        "byor_enabled": st.config.byor_enabled,
    }))
}

#[derive(Deserialize)]
struct LaunchBody {
    repo_url: String,
    #[serde(default, rename = "ref")]
    git_ref: Option<String>,
}

async fn create_session(State(st): State<AppState>, caller: Caller, body: Bytes) -> Result<Response, ApiError> {
    let body: LaunchBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    match st.manager.request_launch(&caller.login, &body.repo_url, body.git_ref.as_deref()) {
        Ok(s) => Ok((
            StatusCode::ACCEPTED,
            Json(json!({ "id": s.id, "state": s.state, "route_path": s.route_path })),
        )
            .into_response()),
        Err(e @ SessionError::QuotaExceeded { .. }) => {
            let active: Vec<SessionSummary> = st
                .manager
                .list(Some(&caller.login))
                .iter()
                .filter(|s| s.is_active())
                .map(SessionSummary::from)
                .collect();
            let mut err = ApiError::from(e);
            err.extra = Some(("active", json!(active)));
            Err(err)
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Deserialize)]
struct ListQuery {
    all: Option<String>,
}

async fn list_sessions(State(st): State<AppState>, caller: Caller, Query(q): Query<ListQuery>) -> Json<Vec<SessionSummary>> {
    let all = caller.admin && q.all.as_deref().is_some_and(|v| matches!(v, "1" | "true" | "yes"));
    let sessions = st.manager.list(if all { None } else { Some(&caller.login) });
    Json(sessions.iter().map(SessionSummary::from).collect())
}

fn visible_session(st: &AppState, caller: &Caller, id: &str) -> Result<Session, ApiError> {
    let s = st.manager.get(id).ok_or_else(|| ApiError::not_found("session"))?;
    if s.user_login != caller.login && !caller.admin {
        return Err(ApiError::forbidden("this session belongs to another user"));
    }
    Ok(s)
}

async fn get_session(State(st): State<AppState>, caller: Caller, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    visible_session(&st, &caller, &id).map(Json)
}

async fn delete_session(State(st): State<AppState>, caller: Caller, Path(id): Path<String>) -> Result<Response, ApiError> {
    let outcome = st.manager.stop_session(&id, &caller.login, caller.admin)?;
    let state = st.manager.get(&id).map(|s| s.state);
    let status = match outcome {
        StopOutcome::Accepted | StopOutcome::AlreadyStopping => StatusCode::ACCEPTED,
        StopOutcome::AlreadyTerminal(_) => StatusCode::OK,
    };
    Ok((status, Json(json!({ "id": id, "state": state }))).into_response())
}

#[derive(Deserialize)]
struct LogQuery {
    from: Option<u64>,
    /// Seconds to wait for new lines before answering with an empty batch.
    wait: Option<u64>,
}

async fn session_logs(
    State(st): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    Query(q): Query<LogQuery>,
) -> Result<Json<LogBatch>, ApiError> {
    visible_session(&st, &caller, &id)?;
    let from = q.from.unwrap_or(0);
    let deadline = tokio::time::Instant::now() + Duration::from_secs(q.wait.unwrap_or(0)).min(MAX_LOG_WAIT);
    loop {
        let batch = match st.manager.builds().tail_log(&id, from) {
            Ok(b) => b,
            Err(_) => LogBatch {
                lines: Vec::new(),
                next_index: from,
                terminal: st.manager.get(&id).is_none_or(|s| !s.is_active() || s.state >= SessionState::Spawning),
            },
        };
        if !batch.lines.is_empty() || batch.terminal || tokio::time::Instant::now() >= deadline {
            return Ok(Json(batch));
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

#[derive(Deserialize)]
struct ByorBody {
    address: Option<String>,
    #[serde(default)]
    tls: bool,
}

fn byor_allowed(st: &AppState, caller: &Caller, login: &str) -> Result<(), ApiError> {
    if !st.config.byor_enabled {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "byor_disabled",
            "bring-your-own-resources endpoints are disabled on this hub",
        ));
    }
    if caller.login != login && !caller.admin {
        return Err(ApiError::forbidden("cannot manage another user's endpoint"));
    }
    Ok(())
}

async fn get_byor(State(st): State<AppState>, caller: Caller, Path(login): Path<String>) -> Result<Json<Value>, ApiError> {
    byor_allowed(&st, &caller, &login)?;
    Ok(Json(json!({ "login": login, "endpoint": st.manager.byor_endpoint(&login) })))
}

async fn put_byor(
    State(st): State<AppState>,
    caller: Caller,
    Path(login): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    byor_allowed(&st, &caller, &login)?;
    let body: ByorBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let Some(address) = body.address else {
        st.manager.set_byor(&login, None);
        return Ok(Json(json!({ "login": login, "endpoint": null, "reachable": null })));
    };
    let endpoint = RuntimeEndpoint::parse(&address, body.tls, format!("byor:{login}"))
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let ping = tokio::time::timeout(Duration::from_secs(10), st.manager.driver().ping(&endpoint)).await;
    let (reachable, detail) = match ping {
        Ok(Ok(())) => (true, None),
        Ok(Err(e)) => (false, Some(e.to_string())),
        Err(_) => (false, Some("ping timed out".to_string())),
    };
    st.manager.set_byor(&login, Some(endpoint.clone()));
    Ok(Json(json!({
        "login": login,
        "endpoint": endpoint,
        "reachable": reachable,
        "detail": detail,
    })))
}

async fn api_fallback(State(st): State<AppState>, req: Request) -> ApiError {
    let (mut parts, _) = req.into_parts();
    match Caller::from_request_parts(&mut parts, &st).await {
        Err(e) => e,
        Ok(_) => ApiError::not_found(&format!("route {}", parts.uri.path())),
    }
}

async fn api_method_not_allowed(State(st): State<AppState>, req: Request) -> ApiError {
    let (mut parts, _) = req.into_parts();
    match Caller::from_request_parts(&mut parts, &st).await {
        Err(e) => e,
        Ok(_) => ApiError::new(
            StatusCode::METHOD_NOT_ALLOWED,
            "method_not_allowed",
            format!("{} not allowed here", parts.method),
        ),
    }
}

async fn proxy(State(st): State<AppState>, ConnectInfo(peer): ConnectInfo<SocketAddr>, req: Request<Body>) -> Response {
    st.proxy.handle(req, Some(peer)).await
}
