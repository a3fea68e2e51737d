use std::future::Future;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::Duration;

use axum::body::Body;
use bytes::Bytes;
use http::header::{self, HeaderMap, HeaderName, HeaderValue};
use http::{Request, Response, StatusCode};
use http_body::Frame;
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;
use tokio::net::TcpStream;
use tokio::time::Sleep;

use super::{Resolved, RouteTable};

/// Connection-scoped headers that are never forwarded.
pub const HOP_BY_HOP_HEADERS: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

/// Who is making a request, and whether they may see every session.
pub trait AccessPolicy: Send + Sync {
    /// Login behind the request's credentials, if they are valid.
    fn authenticate(&self, headers: &HeaderMap) -> Option<String>;
    fn is_admin(&self, login: &str) -> bool;
}

/// Told about every forwarded request.
pub trait ActivitySink: Send + Sync {
    fn touch(&self, session_id: &str);
}

#[derive(Debug, Clone, Copy)]
pub struct ProxyConfig {
    pub connect_timeout: Duration,
    /// Longest wait for response headers or between body frames.
    pub idle_timeout: Duration,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            connect_timeout: Duration::from_secs(5),
            idle_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Clone)]
pub struct Proxy {
    routes: Arc<RouteTable>,
    policy: Arc<dyn AccessPolicy>,
    activity: Arc<dyn ActivitySink>,
    config: ProxyConfig,
}

fn text_response(status: StatusCode, content_type: &'static str, body: String) -> Response<Body> {
    let mut resp = Response::new(Body::from(body));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    resp
}

fn error(status: StatusCode, msg: &str) -> Response<Body> {
    text_response(status, "text/plain; charset=utf-8", format!("{msg}\n"))
}

fn no_route_page(path: &str) -> Response<Body> {
    let escaped = path
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;");
    text_response(
        StatusCode::NOT_FOUND,
        "text/html; charset=utf-8",
        format!(
            "<!doctype html><title>No session</title>\
             <h1>No running session at {escaped}</h1>\
             <p>The session may have stopped or never started. \
             Launch a repository from the <a href=\"/\">hub</a> \
             or with <code>POST /api/sessions</code>.</p>\n"
        ),
    )
}

fn is_upgrade(headers: &HeaderMap) -> bool {
    headers.contains_key(header::UPGRADE)
        && headers
            .get_all(header::CONNECTION)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .flat_map(|v| v.split(','))
            .any(|t| t.trim().eq_ignore_ascii_case("upgrade"))
}

/// Removes hop-by-hop headers, including any named by `Connection`.
fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let named: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|t| HeaderName::from_bytes(t.trim().as_bytes()).ok())
        .collect();
    for name in named {
        headers.remove(name);
    }
    for name in HOP_BY_HOP_HEADERS {
        headers.remove(name);
    }
}

/// Response body wrapper failing when no frame arrives within `idle`.
struct IdleTimeoutBody {
    inner: Incoming,
    idle: Duration,
    timer: Pin<Box<Sleep>>,
}

impl IdleTimeoutBody {
    fn new(inner: Incoming, idle: Duration) -> Self {
        IdleTimeoutBody {
            inner,
            idle,
            timer: Box::pin(tokio::time::sleep(idle)),
        }
    }
}

impl http_body::Body for IdleTimeoutBody {
    type Data = Bytes;
    type Error = Box<dyn std::error::Error + Send + Sync>;

    fn poll_frame(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Result<Frame<Bytes>, Self::Error>>> {
        let this = &mut *self;
        match Pin::new(&mut this.inner).poll_frame(cx) {
            Poll::Ready(frame) => {
                let deadline = tokio::time::Instant::now() + this.idle;
                this.timer.as_mut().reset(deadline);
                Poll::Ready(frame.map(|f| f.map_err(Into::into)))
            }
            Poll::Pending => match this.timer.as_mut().poll(cx) {
                Poll::Ready(()) => Poll::Ready(Some(Err("backend idle timeout".into()))),
                Poll::Pending => Poll::Pending,
            },
        }
    }

    fn is_end_stream(&self) -> bool {
        self.inner.is_end_stream()
    }

    fn size_hint(&self) -> http_body::SizeHint {
        self.inner.size_hint()
    }
}

impl Proxy {
    pub fn new(
        routes: Arc<RouteTable>,
        policy: Arc<dyn AccessPolicy>,
        activity: Arc<dyn ActivitySink>,
        config: ProxyConfig,
    ) -> Self {
        Proxy {
            routes,
            policy,
            activity,
            config,
        }
    }

    pub fn routes(&self) -> &Arc<RouteTable> {
        &self.routes
    }

    /// Authenticates, resolves, authorizes and forwards one request.
    ///
    /// 401 without valid credentials, 404 when no route matches, 403 when
    /// the route belongs to someone else, 502 when the backend cannot be
    /// reached, 504 when it does not answer in time.
    pub async fn handle(&self, req: Request<Body>, peer: Option<SocketAddr>) -> Response<Body> {
        let Some(login) = self.policy.authenticate(req.headers()) else {
            return error(StatusCode::UNAUTHORIZED, "authentication required");
        };
        let path = req.uri().path().to_string();
        let Some(resolved) = self.routes.resolve(&path) else {
            if self.routes.resolve(&format!("{path}/")).is_some() {
                let location = match req.uri().query() {
                    Some(q) => format!("{path}/?{q}"),
                    None => format!("{path}/"),
                };
                let mut resp = Response::new(Body::empty());
                *resp.status_mut() = StatusCode::FOUND;
                if let Ok(v) = HeaderValue::from_str(&location) {
                    resp.headers_mut().insert(header::LOCATION, v);
                }
                return resp;
            }
            return no_route_page(&path);
        };
        if resolved.target.owner != login && !self.policy.is_admin(&login) {
            return error(StatusCode::FORBIDDEN, "this session belongs to another user");
        }
        self.activity.touch(&resolved.target.session_id);
        self.forward(req, peer, &resolved).await
    }

    async fn forward(&self, req: Request<Body>, peer: Option<SocketAddr>, resolved: &Resolved) -> Response<Body> {
        let (mut parts, body) = req.into_parts();
        let upgrade = is_upgrade(&parts.headers);
        let client_upgrade = if upgrade {
            parts.extensions.remove::<hyper::upgrade::OnUpgrade>()
        } else {
            None
        };
        let upgrade_proto = parts.headers.get(header::UPGRADE).cloned();

        let mut headers = std::mem::take(&mut parts.headers);
        strip_hop_by_hop(&mut headers);
        if let (true, Some(proto)) = (upgrade, upgrade_proto) {
            headers.insert(header::CONNECTION, HeaderValue::from_static("upgrade"));
            headers.insert(header::UPGRADE, proto);
        }
        if let Some(peer) = peer {
            let forwarded_for = match headers.get("x-forwarded-for").and_then(|v| v.to_str().ok()) {
                Some(prev) => format!("{prev}, {}", peer.ip()),
                None => peer.ip().to_string(),
            };
            if let Ok(v) = HeaderValue::from_str(&forwarded_for) {
                headers.insert("x-forwarded-for", v);
            }
        }
        if !headers.contains_key("x-forwarded-proto") {
            headers.insert("x-forwarded-proto", HeaderValue::from_static("http"));
        }
        if !headers.contains_key(header::HOST) {
            if let Ok(v) = HeaderValue::from_str(&resolved.target.backend) {
                headers.insert(header::HOST, v);
            }
        }

        let path_and_query = parts
            .uri
            .path_and_query()
            .map(|pq| pq.as_str().to_string())
            .unwrap_or_else(|| "/".to_string());
        let mut upstream = Request::new(body);
        *upstream.method_mut() = parts.method;
        *upstream.uri_mut() = match path_and_query.parse() {
            Ok(u) => u,
            Err(_) => return error(StatusCode::BAD_REQUEST, "invalid request target"),
        };
        *upstream.headers_mut() = headers;

        let backend = &resolved.target.backend;
        let stream = match tokio::time::timeout(self.config.connect_timeout, TcpStream::connect(backend.as_str())).await {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                tracing::debug!(%backend, "backend connect failed: {e}");
                return error(StatusCode::BAD_GATEWAY, "session backend is not reachable");
            }
            Err(_) => return error(StatusCode::BAD_GATEWAY, "session backend connect timed out"),
        };
        let _ = stream.set_nodelay(true);
        let (mut sender, conn) = match hyper::client::conn::http1::handshake(TokioIo::new(stream)).await {
            Ok(pair) => pair,
            Err(e) => {
                tracing::debug!(%backend, "backend handshake failed: {e}");
                return error(StatusCode::BAD_GATEWAY, "session backend handshake failed");
            }
        };
        tokio::spawn(async move {
            if let Err(e) = conn.with_upgrades().await {
                tracing::debug!("backend connection ended: {e}");
            }
        });

        let mut resp = match tokio::time::timeout(self.config.idle_timeout, sender.send_request(upstream)).await {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => {
                tracing::debug!(%backend, "backend request failed: {e}");
                return error(StatusCode::BAD_GATEWAY, "session backend closed the connection");
            }
            Err(_) => return error(StatusCode::GATEWAY_TIMEOUT, "session backend timed out"),
        };

        if resp.status() == StatusCode::SWITCHING_PROTOCOLS {
            let Some(client_upgrade) = client_upgrade else {
                return error(StatusCode::BAD_GATEWAY, "backend switched protocols unexpectedly");
            };
            let backend_upgrade = hyper::upgrade::on(&mut resp);
            tokio::spawn(async move {
                match tokio::try_join!(client_upgrade, backend_upgrade) {
                    Ok((client, backend)) => {
                        let mut client = TokioIo::new(client);
                        let mut backend = TokioIo::new(backend);
                        if let Err(e) = tokio::io::copy_bidirectional(&mut client, &mut backend).await {
                            tracing::debug!("upgraded stream ended: {e}");
                        }
                    }
                    Err(e) => tracing::debug!("upgrade failed: {e}"),
                }
            });
            let (parts, _) = resp.into_parts();
            return Response::from_parts(parts, Body::empty());
        }

        let (mut parts, body) = resp.into_parts();
        strip_hop_by_hop(&mut parts.headers);
        Response::from_parts(parts, Body::new(IdleTimeoutBody::new(body, self.config.idle_timeout)))
    }
}
