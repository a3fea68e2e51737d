use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::RngCore;

use super::{AuthError, HubToken, Identity, IdentityProvider, TokenError, TokenSigner};
use crate::clock::{now_millis, Millis};

pub const DEFAULT_TOKEN_LIFETIME: Millis = 12 * 3_600_000;
pub const DEFAULT_NONCE_TTL: Millis = 10 * 60_000;

#[derive(Debug, Clone)]
pub struct AuthConfig {
    /// Absolute URL of the hub's OAuth callback.
    pub callback_url: String,
    pub token_lifetime: Millis,
    pub nonce_ttl: Millis,
    /// Empty admits every authenticated login.
    pub allow_list: BTreeSet<String>,
}

impl AuthConfig {
    pub fn new(callback_url: impl Into<String>) -> Self {
        AuthConfig {
            callback_url: callback_url.into(),
            token_lifetime: DEFAULT_TOKEN_LIFETIME,
            nonce_ttl: DEFAULT_NONCE_TTL,
            allow_list: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoginStart {
    pub authorize_url: String,
    pub state_nonce: String,
}

#[derive(Debug, Clone)]
pub struct CompletedLogin {
    pub identity: Identity,
    pub token: HubToken,
    pub redirect_after: String,
}

#[derive(Debug)]
struct PendingLogin {
    expires_at: Millis,
    redirect_after: String,
}

/// Drives the login flow and verifies hub tokens.
pub struct Authenticator {
    provider: Arc<dyn IdentityProvider>,
    signer: TokenSigner,
    config: AuthConfig,
    nonces: Mutex<HashMap<String, PendingLogin>>,
}

impl std::fmt::Debug for Authenticator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authenticator")
            .field("provider", &self.provider.name())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

fn fresh_nonce() -> String {
    let mut bytes = [0u8; 24];
    rand::thread_rng().fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

impl Authenticator {
    pub fn new(provider: Arc<dyn IdentityProvider>, signer: TokenSigner, config: AuthConfig) -> Self {
        Authenticator {
            provider,
            signer,
            config,
            nonces: Mutex::new(HashMap::new()),
        }
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn signer(&self) -> &TokenSigner {
        &self.signer
    }

    pub fn token_lifetime(&self) -> Millis {
        self.config.token_lifetime
    }

    pub fn begin_login(&self, redirect_after: &str) -> LoginStart {
        self.begin_login_at(redirect_after, now_millis())
    }

    pub fn begin_login_at(&self, redirect_after: &str, now: Millis) -> LoginStart {
        let mut nonces = self.nonces.lock().unwrap_or_else(|e| e.into_inner());
        nonces.retain(|_, p| p.expires_at > now);
        let nonce = loop {
            let n = fresh_nonce();
            if !nonces.contains_key(&n) {
                break n;
            }
        };
        nonces.insert(
            nonce.clone(),
            PendingLogin {
                expires_at: now + self.config.nonce_ttl,
                redirect_after: redirect_after.to_string(),
            },
        );
        LoginStart {
            authorize_url: self.provider.authorize_url(&nonce, &self.config.callback_url),
            state_nonce: nonce,
        }
    }

    pub async fn complete_login(&self, code: &str, state_nonce: &str) -> Result<CompletedLogin, AuthError> {
        self.complete_login_at(code, state_nonce, now_millis()).await
    }

    /// Consumes the nonce before contacting the provider, so a nonce is
    /// single-use even when the exchange fails.
    pub async fn complete_login_at(&self, code: &str, state_nonce: &str, now: Millis) -> Result<CompletedLogin, AuthError> {
        let pending = self
            .nonces
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(state_nonce)
            .ok_or(AuthError::BadState)?;
        if now >= pending.expires_at {
            return Err(AuthError::BadState);
        }
        let identity = self.provider.exchange(code, &self.config.callback_url).await?;
        if !self.config.allow_list.is_empty() && !self.config.allow_list.contains(&identity.login) {
            tracing::warn!(login = %identity.login, "login refused by allow list");
            return Err(AuthError::NotAllowed(identity.login));
        }
        let token = self.signer.mint(&identity.login, now, self.config.token_lifetime);
        tracing::info!(login = %identity.login, provider = %identity.provider, "login completed");
        Ok(CompletedLogin {
            identity,
            token,
            redirect_after: pending.redirect_after,
        })
    }

    pub fn verify_token(&self, raw: &str, now: Millis) -> Result<Identity, TokenError> {
        self.signer.verify(raw, now)
    }
}
