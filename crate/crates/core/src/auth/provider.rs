use std::collections::HashMap;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use http::{header, Request};
use http_body_util::Full;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{normalize_login, AuthError, Identity};
use crate::http_client::{self, Target};

/// An OAuth2 authorization-code identity provider.
#[async_trait]
pub trait IdentityProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Where to send the browser to start a login.
    fn authorize_url(&self, state: &str, redirect_uri: &str) -> String;

    /// Exchanges an authorization code for the user's identity.
    async fn exchange(&self, code: &str, redirect_uri: &str) -> Result<Identity, AuthError>;
}

fn with_query(base: &str, pairs: &[(&str, &str)]) -> String {
    match url::Url::parse(base) {
        Ok(mut u) => {
            {
                let mut q = u.query_pairs_mut();
                for (k, v) in pairs {
                    if !v.is_empty() {
                        q.append_pair(k, v);
                    }
                }
            }
            u.to_string()
        }
        Err(_) => {
            let query: String = url::form_urlencoded::Serializer::new(String::new())
                .extend_pairs(pairs.iter().filter(|(_, v)| !v.is_empty()))
                .finish();
            format!("{base}?{query}")
        }
    }
}

/// Maps preconfigured codes to logins, without any network traffic.
#[derive(Debug, Clone, Default)]
pub struct StaticProvider {
    codes: HashMap<String, String>,
}

impl StaticProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_code(mut self, code: &str, login: &str) -> Self {
        self.codes.insert(code.to_string(), login.to_string());
        self
    }

    /// Codes of the form `ok-{login}` for each login.
    pub fn with_logins<'a>(mut self, logins: impl IntoIterator<Item = &'a str>) -> Self {
        for l in logins {
            self.codes.insert(format!("ok-{l}"), l.to_string());
        }
        self
    }
}

#[async_trait]
impl IdentityProvider for StaticProvider {
    fn name(&self) -> &str {
        "static"
    }

    fn authorize_url(&self, state: &str, redirect_uri: &str) -> String {
        with_query(
            "https://static.invalid/authorize",
            &[("client_id", "static"), ("redirect_uri", redirect_uri), ("state", state)],
        )
    }

    async fn exchange(&self, code: &str, _redirect_uri: &str) -> Result<Identity, AuthError> {
        let login = self
            .codes
            .get(code)
            .ok_or_else(|| AuthError::ExchangeFailed(format!("unknown code `{code}`")))?;
        let normalized = normalize_login(login)?;
        Ok(Identity {
            display_name: login.clone(),
            login: normalized,
            provider: self.name().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OAuthProviderConfig {
    #[serde(default = "default_provider_name")]
    pub name: String,
    pub client_id: String,
    pub client_secret: String,
    pub authorize_url: String,
    pub token_url: String,
    pub user_url: String,
    /// Space-separated scopes; empty requests the provider's default.
    #[serde(default)]
    pub scope: String,
    /// Field of the user document holding the login.
    #[serde(default = "default_login_field")]
    pub login_field: String,
}

fn default_provider_name() -> String {
    "github".into()
}

fn default_login_field() -> String {
    "login".into()
}

impl OAuthProviderConfig {
    pub fn github(client_id: &str, client_secret: &str) -> Self {
        OAuthProviderConfig {
            name: "github".into(),
            client_id: client_id.into(),
            client_secret: client_secret.into(),
            authorize_url: "https://github.com/login/oauth/authorize".into(),
            token_url: "https://github.com/login/oauth/access_token".into(),
            user_url: "https://api.github.com/user".into(),
            scope: String::new(),
            login_field: "login".into(),
        }
    }

    pub fn gitlab(client_id: &str, client_secret: &str) -> Self {
        OAuthProviderConfig {
            name: "gitlab".into(),
            client_id: client_id.into(),
            client_secret: client_secret.into(),
            authorize_url: "https://gitlab.com/oauth/authorize".into(),
            token_url: "https://gitlab.com/oauth/token".into(),
            user_url: "https://gitlab.com/api/v4/user".into(),
            scope: "read_user".into(),
            login_field: "username".into(),
        }
    }
}

/// Standard authorization-code flow over HTTP(S).
#[derive(Debug, Clone)]
pub struct OAuthProvider {
    config: OAuthProviderConfig,
    timeout: Duration,
}

impl OAuthProvider {
    pub fn new(config: OAuthProviderConfig) -> Self {
        OAuthProvider {
            config,
            timeout: Duration::from_secs(15),
        }
    }

    async fn call(&self, req: Request<Full<Bytes>>, url: &url::Url) -> Result<Value, AuthError> {
        let target = Target::from_url(url).map_err(|e| AuthError::ExchangeFailed(e.to_string()))?;
        let fut = http_client::send_full(&target, req, self.timeout);
        let (status, body) = tokio::time::timeout(self.timeout, fut)
            .await
            .map_err(|_| AuthError::ExchangeFailed(format!("{url}: timed out")))?
            .map_err(|e| AuthError::ExchangeFailed(e.to_string()))?;
        if !status.is_success() {
            return Err(AuthError::ExchangeFailed(format!(
                "{url}: HTTP {status}: {}",
                String::from_utf8_lossy(&body).trim()
            )));
        }
        serde_json::from_slice(&body).map_err(|e| AuthError::ExchangeFailed(format!("{url}: {e}")))
    }
}

fn parse_url(raw: &str) -> Result<url::Url, AuthError> {
    url::Url::parse(raw).map_err(|e| AuthError::ExchangeFailed(format!("{raw}: {e}")))
}

fn origin_form(u: &url::Url) -> String {
    match u.query() {
        Some(q) => format!("{}?{q}", u.path()),
        None => u.path().to_string(),
    }
}

#[async_trait]
impl IdentityProvider for OAuthProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn authorize_url(&self, state: &str, redirect_uri: &str) -> String {
        with_query(
            &self.config.authorize_url,
            &[
                ("response_type", "code"),
                ("client_id", &self.config.client_id),
                ("redirect_uri", redirect_uri),
                ("state", state),
                ("scope", &self.config.scope),
            ],
        )
    }

    async fn exchange(&self, code: &str, redirect_uri: &str) -> Result<Identity, AuthError> {
        let token_url = parse_url(&self.config.token_url)?;
        let form: String = url::form_urlencoded::Serializer::new(String::new())
            .append_pair("grant_type", "authorization_code")
            .append_pair("code", code)
            .append_pair("redirect_uri", redirect_uri)
            .append_pair("client_id", &self.config.client_id)
            .append_pair("client_secret", &self.config.client_secret)
            .finish();
        let req = Request::post(origin_form(&token_url))
            .header(header::HOST, host_header(&token_url))
            .header(header::ACCEPT, "application/json")
            .header(header::CONTENT_TYPE, "application/x-www-form-urlencoded")
            .header(header::USER_AGENT, "everhub")
            .body(Full::new(Bytes::from(form)))
            .map_err(|e| AuthError::ExchangeFailed(e.to_string()))?;
        let token = self.call(req, &token_url).await?;
        let access_token = token
            .get("access_token")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                let reason = token
                    .get("error_description")
                    .or_else(|| token.get("error"))
                    .and_then(Value::as_str)
                    .unwrap_or("no access_token in response");
                AuthError::ExchangeFailed(reason.to_string())
            })?
            .to_string();

        let user_url = parse_url(&self.config.user_url)?;
        let req = Request::get(origin_form(&user_url))
            .header(header::HOST, host_header(&user_url))
            .header(header::ACCEPT, "application/json")
            .header(header::AUTHORIZATION, format!("Bearer {access_token}"))
            .header(header::USER_AGENT, "everhub")
            .body(Full::new(Bytes::new()))
            .map_err(|e| AuthError::ExchangeFailed(e.to_string()))?;
        let user = self.call(req, &user_url).await?;
        let raw_login = user
            .get(&self.config.login_field)
            .and_then(Value::as_str)
            .ok_or_else(|| AuthError::ExchangeFailed(format!("user document lacks `{}`", self.config.login_field)))?;
        let login = normalize_login(raw_login)?;
        let display_name = user
            .get("name")
            .and_then(Value::as_str)
            .filter(|n| !n.is_empty())
            .unwrap_or(raw_login)
            .to_string();
        Ok(Identity {
            login,
            provider: self.config.name.clone(),
            display_name,
        })
    }
}

fn host_header(u: &url::Url) -> String {
    match (u.host_str(), u.port()) {
        (Some(h), Some(p)) => format!("{h}:{p}"),
        (Some(h), None) => h.to_string(),
        _ => String::new(),
    }
}
