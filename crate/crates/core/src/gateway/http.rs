use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, GatewayError, ProviderConfig, RateLimiter, ResponseHint, Semaphore};

/// Which JSON request/response shape the endpoint speaks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `messages` in, `choices[0].message.content` out, bearer auth.
    #[default]
    Openai,
    /// top-level `system`, `content[].text` out, `x-api-key` auth.
    Anthropic,
    /// `contents[].parts`, `candidates[0].content.parts[].text` out.
    Gemini,
}

pub struct HttpProvider {
    cfg: ProviderConfig,
    agent: ureq::Agent,
    limiter: Option<RateLimiter>,
    in_flight: Semaphore,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("api_style", &self.cfg.api_style)
            .field("endpoint", &self.cfg.endpoint)
            .field("model", &self.cfg.model)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

enum Attempt {
    Done(String),
    Retry { reason: String, wait: Option<Duration> },
}

impl HttpProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        // Fail on a missing key now rather than on the first request.
        api_key(&cfg)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .build()
            .into();
        let limiter = cfg.rate_limit_rpm.map(RateLimiter::per_minute);
        let in_flight = Semaphore::new(cfg.max_in_flight);
        Ok(HttpProvider { cfg, agent, limiter, in_flight })
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let cfg = &self.cfg;
        match cfg.api_style {
            ApiStyle::Openai => {
                let mut body = json!({
                    "model": cfg.model,
                    "messages": [
                        {"role": "system", "content": req.system},
                        {"role": "user", "content": req.user},
                    ],
                });
                if let Some(t) = cfg.temperature {
                    body["temperature"] = json!(t);
                }
                if cfg.json_mode && req.response_hint == ResponseHint::JsonObject {
                    body["response_format"] = json!({"type": "json_object"});
                }
                body
            }
            ApiStyle::Anthropic => {
                let mut body = json!({
                    "model": cfg.model,
                    "max_tokens": cfg.max_tokens.unwrap_or(4096),
                    "system": req.system,
                    "messages": [{"role": "user", "content": req.user}],
                });
                if let Some(t) = cfg.temperature {
                    body["temperature"] = json!(t);
                }
                body
            }
            ApiStyle::Gemini => {
                let mut body = json!({
                    "systemInstruction": {"parts": [{"text": req.system}]},
                    "contents": [{"role": "user", "parts": [{"text": req.user}]}],
                });
                let mut gen = serde_json::Map::new();
                if let Some(t) = cfg.temperature {
                    gen.insert("temperature".into(), json!(t));
                }
                if let Some(m) = cfg.max_tokens {
                    gen.insert("maxOutputTokens".into(), json!(m));
                }
                if cfg.json_mode && req.response_hint == ResponseHint::JsonObject {
                    gen.insert("responseMimeType".into(), json!("application/json"));
                }
                if !gen.is_empty() {
                    body["generationConfig"] = Value::Object(gen);
                }
                body
            }
        }
    }

    fn attempt(&self, body: &Value, key: Option<&str>) -> Result<Attempt, GatewayError> {
        let url = self.cfg.endpoint.as_deref().unwrap();
        let mut call = self.agent.post(url).header("content-type", "application/json");
        if let Some(key) = key {
            call = match self.cfg.api_style {
                ApiStyle::Openai => call.header("authorization", format!("Bearer {key}")),
                ApiStyle::Anthropic => call.header("x-api-key", key).header("anthropic-version", "2023-06-01"),
                ApiStyle::Gemini => call.header("x-goog-api-key", key),
            };
        }
        let resp = match call.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::BadUri(u)) => return Err(GatewayError::Config(format!("bad endpoint URL {u}"))),
            Err(e) => return Ok(Attempt::Retry { reason: format!("transport: {e}"), wait: None }),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64);
        let text = resp.into_body().read_to_string().unwrap_or_default();
        match status {
            200..=299 => Ok(Attempt::Done(extract_content(self.cfg.api_style, &text)?)),
            401 | 403 => Err(GatewayError::Auth { status }),
            408 | 409 | 429 | 500..=599 => Ok(Attempt::Retry { reason: format!("HTTP {status}"), wait: retry_after }),
            _ => Err(GatewayError::Http { status, body: truncate(&text, 500) }),
        }
    }

    fn backoff(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        let max = Duration::from_millis(self.cfg.backoff_max_ms);
        let exp = Duration::from_millis(self.cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(20)));
        hint.unwrap_or(exp).min(max)
    }
}

fn api_key(cfg: &ProviderConfig) -> Result<Option<String>, GatewayError> {
    match &cfg.api_key_env {
        None => Ok(None),
        Some(var) => match std::env::var(var) {
            Ok(v) if !v.is_empty() => Ok(Some(v)),
            _ => Err(GatewayError::Config(format!("environment variable {var} is not set"))),
        },
    }
}

fn truncate(s: &str, n: usize) -> String {
    match s.char_indices().nth(n) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Pulls the assistant text out of a provider response body.
pub(crate) fn extract_content(style: ApiStyle, body: &str) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Malformed(format!("{e}: {}", truncate(body, 200))))?;
    let joined = |parts: &Value, field: &str| -> Option<String> {
        let texts: Vec<&str> = parts.as_array()?.iter().filter_map(|p| p.get(field)?.as_str()).collect();
        (!texts.is_empty()).then(|| texts.concat())
    };
    let out = match style {
        ApiStyle::Openai => v.pointer("/choices/0/message/content").and_then(Value::as_str).map(str::to_string),
        ApiStyle::Anthropic => v.get("content").and_then(|c| {
            let texts: Vec<&str> = c
                .as_array()?
                .iter()
                .filter(|b| b.get("type").and_then(Value::as_str).is_none_or(|t| t == "text"))
                .filter_map(|b| b.get("text")?.as_str())
                .collect();
            (!texts.is_empty()).then(|| texts.concat())
        }),
        ApiStyle::Gemini => v.pointer("/candidates/0/content/parts").and_then(|p| joined(p, "text")),
    };
    out.ok_or_else(|| GatewayError::Malformed(format!("no message content in {}", truncate(body, 200))))
}

impl ChatProvider for HttpProvider {
    fn model(&self) -> &str {
        &self.cfg.model
    }

    fn temperature(&self) -> Option<f64> {
        self.cfg.temperature
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let key = api_key(&self.cfg)?;
        let body = self.request_body(req);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            let outcome = {
                let _permit = self.in_flight.acquire();
                self.attempt(&body, key.as_deref())?
            };
            match outcome {
                Attempt::Done(text) => {
                    debug!("{} replied after {} attempt(s)", self.cfg.model, attempt + 1);
                    return Ok(text);
                }
                Attempt::Retry { reason, wait } => {
                    last = reason;
                    if attempt + 1 < attempts {
                        let delay = self.backoff(attempt, wait);
                        warn!("{}: {last}; retrying in {delay:?}", self.cfg.model);
                        std::thread::sleep(delay);
                    }
                }
            }
        }
        Err(GatewayError::RetriesExhausted { attempts, last })
    }
}
