//! User authentication: an OAuth2 authorization-code login against the
//! git-hosting provider, and stateless HMAC-signed hub tokens.

mod login;
mod provider;

pub use login::{AuthConfig, Authenticator, CompletedLogin, LoginStart, DEFAULT_NONCE_TTL, DEFAULT_TOKEN_LIFETIME};
pub use provider::{IdentityProvider, OAuthProvider, OAuthProviderConfig, StaticProvider};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use http::HeaderMap;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::clock::Millis;

pub const TOKEN_COOKIE: &str = "everhub_token";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub login: String,
    pub provider: String,
    pub display_name: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("unknown, expired or already used login state")]
    BadState,
    #[error("code exchange failed: {0}")]
    ExchangeFailed(String),
    #[error("login `{0}` is not valid")]
    InvalidLogin(String),
    #[error("login `{0}` is not on the allow list")]
    NotAllowed(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum TokenError {
    #[error("invalid token")]
    Invalid,
    #[error("token expired")]
    Expired,
}

/// Lowercases a provider login and checks it against `[a-z0-9][a-z0-9-]*`.
pub fn normalize_login(raw: &str) -> Result<String, AuthError> {
    let login = raw.trim().to_ascii_lowercase();
    let mut bytes = login.bytes();
    let ok = matches!(bytes.next(), Some(b'a'..=b'z' | b'0'..=b'9'))
        && bytes.all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'-'));
    if ok {
        Ok(login)
    } else {
        Err(AuthError::InvalidLogin(raw.to_string()))
    }
}

/// A decoded hub token. Its wire form is
/// `{login}.{issued_at}.{expires_at}.{base64url(hmac-sha256)}`, the MAC
/// covering everything before the last dot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HubToken {
    pub login: String,
    pub issued_at: Millis,
    pub expires_at: Millis,
    pub signature: Vec<u8>,
}

impl HubToken {
    fn payload(login: &str, issued_at: Millis, expires_at: Millis) -> String {
        format!("{login}.{issued_at}.{expires_at}")
    }

    pub fn encode(&self) -> String {
        format!(
            "{}.{}",
            Self::payload(&self.login, self.issued_at, self.expires_at),
            URL_SAFE_NO_PAD.encode(&self.signature)
        )
    }

    /// Parses the wire form without checking the signature.
    pub fn decode(raw: &str) -> Result<HubToken, TokenError> {
        let mut parts = raw.split('.');
        let (Some(login), Some(issued), Some(expires), Some(sig), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TokenError::Invalid);
        };
        if normalize_login(login).ok().as_deref() != Some(login) {
            return Err(TokenError::Invalid);
        }
        let parse = |s: &str| {
            (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
                .then(|| s.parse::<Millis>().ok())
                .flatten()
                .ok_or(TokenError::Invalid)
        };
        let issued_at = parse(issued)?;
        let expires_at = parse(expires)?;
        if expires_at <= issued_at {
            return Err(TokenError::Invalid);
        }
        let signature = URL_SAFE_NO_PAD.decode(sig).map_err(|_| TokenError::Invalid)?;
        Ok(HubToken {
            login: login.to_string(),
            issued_at,
            expires_at,
            signature,
        })
    }
}

/// Mints and verifies hub tokens under one secret key.
#[derive(Clone)]
pub struct TokenSigner {
    key: Vec<u8>,
}

impl std::fmt::Debug for TokenSigner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenSigner").finish_non_exhaustive()
    }
}

impl TokenSigner {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        TokenSigner { key: key.into() }
    }

    fn mac(&self, payload: &str) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(payload.as_bytes());
        mac
    }

    pub fn mint(&self, login: &str, now: Millis, lifetime_ms: Millis) -> HubToken {
        let expires_at = now + lifetime_ms.max(1);
        let signature = self
            .mac(&HubToken::payload(login, now, expires_at))
            .finalize()
            .into_bytes()
            .to_vec();
        HubToken {
            login: login.to_string(),
            issued_at: now,
            expires_at,
            signature,
        }
    }

    /// Checks format, signature (constant-time) and expiry; valid while
    /// `now < expires_at`.
    pub fn verify(&self, raw: &str, now: Millis) -> Result<Identity, TokenError> {
        let token = HubToken::decode(raw)?;
        self.mac(&HubToken::payload(&token.login, token.issued_at, token.expires_at))
            .verify_slice(&token.signature)
            .map_err(|_| TokenError::Invalid)?;
        if now >= token.expires_at {
            return Err(TokenError::Expired);
        }
        Ok(Identity {
            display_name: token.login.clone(),
            login: token.login,
            provider: "everhub".to_string(),
        })
    }
}

/// Raw token from `Authorization: Bearer …` or the `everhub_token` cookie.
pub fn extract_token(headers: &HeaderMap) -> Option<String> {
    if let Some(v) = headers.get(http::header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        let v = v.trim();
        if v.len() > 7 && v[..7].eq_ignore_ascii_case("bearer ") {
            return Some(v[7..].trim().to_string());
        }
    }
    headers
        .get_all(http::header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|c| c.trim().split_once('='))
        .find(|(k, _)| *k == TOKEN_COOKIE)
        .map(|(_, v)| v.trim_matches('"').to_string())
}
