use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Needles {
    One(String),
    All(Vec<String>),
}

impl Needles {
    fn matches(&self, hay: &str) -> bool {
        match self {
            Needles::One(n) => hay.contains(n.as_str()),
            Needles::All(ns) => ns.iter().all(|n| hay.contains(n.as_str())),
        }
    }
}

/// Reply with `reply` whenever the user message contains every needle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: Needles,
    pub reply: String,
}

/// A script file is either a bare JSON array of replies returned in order,
/// or an object combining content rules (checked first, never consumed), an
/// ordered queue, and a fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub queue: Vec<String>,
    #[serde(default)]
    pub default: Option<String>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, GatewayError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| GatewayError::Script(e.to_string()))?;
        if v.is_array() {
            let queue: Vec<String> = serde_json::from_value(v).map_err(|e| GatewayError::Script(e.to_string()))?;
            return Ok(Script { queue, ..Default::default() });
        }
        serde_json::from_value(v).map_err(|e| GatewayError::Script(e.to_string()))
    }
}

#[derive(Debug)]
pub struct ScriptedProvider {
    model: String,
    temperature: Option<f64>,
    rules: Vec<ScriptRule>,
    queue: Mutex<VecDeque<String>>,
    default: Option<String>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(script: Script) -> Self {
        ScriptedProvider {
            model: script.model.unwrap_or_else(|| "scripted".into()),
            temperature: None,
            rules: script.rules,
            queue: Mutex::new(script.queue.into()),
            default: script.default,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_queue<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(Script { queue: replies.into_iter().map(Into::into).collect(), ..Default::default() })
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::new(Script::parse(&text)?))
    }

    pub fn with_model(mut self, model: &str) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl ChatProvider for ScriptedProvider {
    fn model(&self) -> &str {
        &self.model
    }

    fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(rule) = self.rules.iter().find(|r| r.contains.matches(&req.user)) {
            return Ok(rule.reply.clone());
        }
        if let Some(next) = self.queue.lock().unwrap().pop_front() {
            return Ok(next);
        }
        self.default.clone().ok_or_else(|| GatewayError::Script("script exhausted".into()))
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync;

/// Provider backed by a closure; handy for oracles that read the request.
pub struct FnProvider {
    model: String,
    temperature: Option<f64>,
    f: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl FnProvider {
    pub fn new(model: &str, f: impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        FnProvider { model: model.into(), temperature: None, f: Box::new(f), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for FnProvider {
    fn model(&self) -> &str {
        &self.model
    }

    fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(req)
    }
}
