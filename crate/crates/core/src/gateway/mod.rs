//! Chat-completion access for the overseer and underling roles.
//!
//! Providers are configuration, not code: an [`HttpProvider`] speaks one of
//! three JSON wire shapes, and a [`ScriptedProvider`] replays canned replies
//! so whole training runs can execute offline. A [`Gateway`] pairs a provider
//! with an optional content-addressed [`ResponseCache`].

mod cache;
mod http;
mod parse;
mod scripted;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, ResponseCache};
pub use http::{ApiStyle, HttpProvider};
pub use parse::{parse_overseer_reply, parse_underling_reply, OverseerReply, UnderlingReply};
pub use scripted::{FnProvider, Script, ScriptRule, ScriptedProvider};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("script: {0}")]
    Script(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("could not parse reply: {reason}")]
    Parse { reason: String, raw: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseHint {
    #[default]
    JsonObject,
    BareLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub response_hint: ResponseHint,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, response_hint: ResponseHint) -> Self {
        ChatRequest { system: system.into(), user: user.into(), response_hint }
    }
}

pub trait ChatProvider: Send + Sync {
    fn model(&self) -> &str;
    fn temperature(&self) -> Option<f64>;
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    HttpChat,
    Scripted,
}

fn default_retries() -> u32 {
    5
}
fn default_timeout() -> f64 {
    120.0
}
fn default_backoff() -> u64 {
    500
}
fn default_max_backoff() -> u64 {
    30_000
}
fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub api_style: ApiStyle,
    /// Full URL the request is POSTed to.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding the key; never the key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub rate_limit_rpm: Option<f64>,
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_backoff")]
    pub backoff_max_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Required by the anthropic wire shape.
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// Ask openai-style endpoints for a JSON object when the hint says so.
    #[serde(default)]
    pub json_mode: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::HttpChat,
            api_style: ApiStyle::default(),
            endpoint: None,
            model: String::new(),
            api_key_env: None,
            temperature: None,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            rate_limit_rpm: None,
            script: None,
            backoff_base_ms: default_backoff(),
            backoff_max_ms: default_max_backoff(),
            max_in_flight: default_in_flight(),
            max_tokens: None,
            json_mode: false,
        }
    }
}

impl ProviderConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        ProviderConfig { kind: ProviderKind::Scripted, script: Some(path.into()), ..Default::default() }
    }

    pub fn http(api_style: ApiStyle, endpoint: &str, model: &str, api_key_env: Option<&str>) -> Self {
        ProviderConfig {
            api_style,
            endpoint: Some(endpoint.into()),
            model: model.into(),
            api_key_env: api_key_env.map(str::to_string),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            ProviderKind::HttpChat => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(GatewayError::Config("http_chat needs an endpoint".into()));
                }
                if self.model.is_empty() {
                    return Err(GatewayError::Config("http_chat needs a model".into()));
                }
            }
            ProviderKind::Scripted => {
                if self.script.is_none() {
                    return Err(GatewayError::Config("scripted provider needs a script path".into()));
                }
            }
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        if let Some(rpm) = self.rate_limit_rpm {
            if !(rpm > 0.0 && rpm.is_finite()) {
                return Err(GatewayError::Config("rate_limit_rpm must be positive".into()));
            }
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(GatewayError::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }
}

pub fn build_provider(cfg: &ProviderConfig) -> Result<Arc<dyn ChatProvider>, GatewayError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ProviderKind::HttpChat => Arc::new(HttpProvider::new(cfg.clone())?),
        ProviderKind::Scripted => {
            let path = cfg.script.as_ref().unwrap();
            let mut p = ScriptedProvider::from_file(path)?;
            if !cfg.model.is_empty() {
                p = p.with_model(&cfg.model);
            }
            if let Some(t) = cfg.temperature {
                p = p.with_temperature(t);
            }
            Arc::new(p)
        }
    })
}

/// Spaces requests at least `60 / rpm` seconds apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<std::time::Instant>>,
}

impl RateLimiter {
    pub fn per_minute(rpm: f64) -> Self {
        RateLimiter { interval: Duration::from_secs_f64(60.0 / rpm), next: Mutex::new(None) }
    }

    pub fn acquire(&self) {
        let now = std::time::Instant::now();
        let slot = {
            let mut next = self.next.lock().unwrap();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

/// Counting semaphore bounding simultaneous requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// A provider plus optional cache; what the trainer talks to.
#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    cache: Option<Arc<ResponseCache>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Gateway { provider, cache: None }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn from_config(cfg: &ProviderConfig, cache: Option<Arc<ResponseCache>>) -> Result<Self, GatewayError> {
        Ok(Gateway { provider: build_provider(cfg)?, cache })
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_deref()
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        match &self.cache {
            Some(cache) => cached_complete(cache, self.provider.as_ref(), req),
            None => self.provider.complete(req),
        }
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("model", &self.provider.model()).field("cached", &self.cache.is_some()).finish()
    }
}

/// Returns the cached reply for this exact request, or calls the provider
/// and stores the result. Concurrent misses on one key make one call.
pub fn cached_complete(cache: &ResponseCache, provider: &dyn ChatProvider, req: &ChatRequest) -> Result<String, GatewayError> {
    let key = cache_key(provider.model(), &req.system, &req.user, provider.temperature());
    let lock = cache.key_lock(&key);
    let _held = lock.lock().unwrap();
    if let Some(hit) = cache.get(&key)? {
        return Ok(hit);
    }
    let reply = provider.complete(req)?;
    cache.put(&key, &reply)?;
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn config_validation() {
        assert!(ProviderConfig::default().validate().is_err());
        let ok = ProviderConfig::http(ApiStyle::Openai, "http://localhost:1/v1/chat/completions", "m", None);
        assert!(ok.validate().is_ok());
        assert!(ProviderConfig { kind: ProviderKind::Scripted, ..Default::default() }.validate().is_err());
        let cfg: ProviderConfig = serde_json::from_str(r#"{"kind":"scripted","script":"x.json"}"#).unwrap();
        assert_eq!(cfg.max_retries, 5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Semaphore::new(3);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let rl = RateLimiter::per_minute(60_000.0 / 20.0); // 20 ms apart
        let start = std::time::Instant::now();
        for _ in 0..4 {
            rl.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(60));
    }
}
