//! Minimal one-connection-per-request HTTP/1.1 client over TCP, TLS or a
//! unix socket. Used by the Docker driver and the OAuth provider.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use bytes::Bytes;
use http::{Request, Response};
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpStream, UnixStream};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connect to {target} failed: {source}")]
    Connect {
        target: String,
        #[source]
        source: std::io::Error,
    },
    #[error("connect to {0} timed out")]
    ConnectTimeout(String),
    #[error("http error: {0}")]
    Http(#[from] hyper::Error),
    #[error("invalid url: {0}")]
    Url(String),
}

impl ClientError {
    pub fn is_connect(&self) -> bool {
        matches!(self, ClientError::Connect { .. } | ClientError::ConnectTimeout(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Unix(PathBuf),
    Tcp { host: String, port: u16, tls: bool },
}

impl Target {
    pub fn from_url(url: &url::Url) -> Result<Self, ClientError> {
        let tls = match url.scheme() {
            "https" => true,
            "http" => false,
            other => return Err(ClientError::Url(format!("unsupported scheme {other}"))),
        };
        let host = url
            .host_str()
            .ok_or_else(|| ClientError::Url(format!("{url}: missing host")))?
            .trim_start_matches('[')
            .trim_end_matches(']')
            .to_string();
        let port = url.port_or_known_default().unwrap_or(if tls { 443 } else { 80 });
        Ok(Target::Tcp { host, port, tls })
    }

    /// Value for the `Host` header.
    pub fn authority(&self) -> String {
        match self {
            Target::Unix(_) => "localhost".to_string(),
            Target::Tcp { host, port, .. } => format!("{host}:{port}"),
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Unix(p) => write!(f, "unix://{}", p.display()),
            Target::Tcp { host, port, tls } => {
                write!(f, "{}://{host}:{port}", if *tls { "https" } else { "http" })
            }
        }
    }
}

trait Io: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> Io for T {}

fn tls_config() -> Arc<rustls::ClientConfig> {
    static CONFIG: OnceLock<Arc<rustls::ClientConfig>> = OnceLock::new();
    CONFIG
        .get_or_init(|| {
            let roots = rustls::RootCertStore {
                roots: webpki_roots::TLS_SERVER_ROOTS.to_vec(),
            };
            let config = rustls::ClientConfig::builder_with_provider(Arc::new(
                rustls::crypto::ring::default_provider(),
            ))
            .with_safe_default_protocol_versions()
            .expect("ring supports default protocol versions")
            .with_root_certificates(roots)
            .with_no_client_auth();
            Arc::new(config)
        })
        .clone()
}

async fn connect(target: &Target) -> Result<Box<dyn Io>, ClientError> {
    let connect_err = |source| ClientError::Connect {
        target: target.to_string(),
        source,
    };
    match target {
        Target::Unix(path) => Ok(Box::new(UnixStream::connect(path).await.map_err(connect_err)?)),
        Target::Tcp { host, port, tls: false } => {
            let stream = TcpStream::connect((host.as_str(), *port)).await.map_err(connect_err)?;
            let _ = stream.set_nodelay(true);
            Ok(Box::new(stream))
        }
        Target::Tcp { host, port, tls: true } => {
            let stream = TcpStream::connect((host.as_str(), *port)).await.map_err(connect_err)?;
            let name = rustls::pki_types::ServerName::try_from(host.clone())
                .map_err(|e| ClientError::Url(e.to_string()))?;
            let tls = tokio_rustls::TlsConnector::from(tls_config())
                .connect(name, stream)
                .await
                .map_err(connect_err)?;
            Ok(Box::new(tls))
        }
    }
}

/// Sends one request on a fresh connection. The response body streams from
/// that connection.
pub async fn send<B>(
    target: &Target,
    req: Request<B>,
    connect_timeout: Duration,
) -> Result<Response<Incoming>, ClientError>
where
    B: hyper::body::Body + Send + 'static,
    B::Data: Send,
    B::Error: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    let io = tokio::time::timeout(connect_timeout, connect(target))
        .await
        .map_err(|_| ClientError::ConnectTimeout(target.to_string()))??;
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(io)).await?;
    tokio::spawn(async move {
        if let Err(e) = conn.await {
            tracing::debug!("client connection closed: {e}");
        }
    });
    Ok(sender.send_request(req).await?)
}

/// Sends a request with an in-memory body and collects the whole response.
pub async fn send_full(
    target: &Target,
    req: Request<Full<Bytes>>,
    connect_timeout: Duration,
) -> Result<(http::StatusCode, Bytes), ClientError> {
    let resp = send(target, req, connect_timeout).await?;
    let status = resp.status();
    let body = resp.into_body().collect().await?.to_bytes();
    Ok((status, body))
}
