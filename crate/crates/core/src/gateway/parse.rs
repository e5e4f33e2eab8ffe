use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverseerReply {
    pub narration: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderlingReply {
    pub label: String,
    pub reasoning: Option<String>,
    pub raw: String,
}

const NARRATION_KEYS: [&str; 4] = ["narration", "reasoning", "explanation", "analysis"];
const PROMPT_KEYS: [&str; 4] = ["prompt", "rules", "new_prompt", "narrative"];
const LABEL_KEYS: [&str; 6] = ["label", "answer", "prediction", "outcome", "class", "result"];

/// Escapes raw control characters inside string literals, a common defect
/// in model-written JSON.
fn repair_json(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let (mut in_str, mut escaped) = (false, false);
    for c in s.chars() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            } else if c == '\n' {
                out.push_str("\\n");
                continue;
            } else if c == '\r' {
                continue;
            } else if c == '\t' {
                out.push_str("\\t");
                continue;
            }
        } else if c == '"' {
            in_str = true;
        }
        out.push(c);
    }
    out
}

fn first_value_at(text: &str) -> Option<Value> {
    let mut stream = serde_json::Deserializer::from_str(text).into_iter::<Value>();
    stream.next()?.ok()
}

/// Every JSON object that starts at some `{` in `text`, in order.
fn json_objects(text: &str) -> impl Iterator<Item = Map<String, Value>> + '_ {
    text.char_indices().filter(|(_, c)| *c == '{').filter_map(move |(i, _)| {
        let slice = &text[i..];
        let v = first_value_at(slice).or_else(|| first_value_at(&repair_json(slice)))?;
        match v {
            Value::Object(m) => Some(m),
            _ => None,
        }
    })
}

fn lookup<'a>(m: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| {
        m.get(*k).or_else(|| m.iter().find(|(name, _)| name.eq_ignore_ascii_case(k)).map(|(_, v)| v))
    })
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().filter_map(as_text).collect();
            (!parts.is_empty()).then(|| parts.join("\n"))
        }
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Takes the first JSON object carrying a prompt, fenced or not.
pub fn parse_overseer_reply(text: &str) -> Result<OverseerReply, GatewayError> {
    let err = |reason: &str| GatewayError::Parse { reason: reason.into(), raw: text.to_string() };
    let mut saw_object = false;
    for obj in json_objects(text) {
        saw_object = true;
        let Some(prompt) = lookup(&obj, &PROMPT_KEYS).and_then(as_text) else {
            continue;
        };
        let prompt = prompt.trim().to_string();
        if prompt.is_empty() {
            return Err(err("prompt is empty"));
        }
        let narration = lookup(&obj, &NARRATION_KEYS).and_then(as_text).unwrap_or_default();
        return Ok(OverseerReply { narration: narration.trim().to_string(), prompt });
    }
    Err(err(if saw_object { "no prompt key in reply" } else { "no JSON object in reply" }))
}

fn match_label<'a>(candidate: &str, labels: [&'a str; 2]) -> Option<&'a str> {
    let c = candidate.trim().trim_matches(|ch: char| ch == '"' || ch == '\'' || ch == '.');
    labels.into_iter().find(|l| l.eq_ignore_ascii_case(c))
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Earliest standalone occurrence of either label, case-insensitively; on a
/// shared starting position the longer label wins.
fn first_standalone<'a>(text: &str, labels: [&'a str; 2]) -> Option<&'a str> {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, &str)> = None;
    for label in labels {
        let needle = label.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        for (pos, _) in lower.match_indices(&needle) {
            let before = lower[..pos].chars().next_back();
            let after = lower[pos + needle.len()..].chars().next();
            if before.is_some_and(is_word) || after.is_some_and(is_word) {
                continue;
            }
            let better = match best {
                None => true,
                Some((p, l)) => pos < p || (pos == p && label.len() > l.len()),
            };
            if better {
                best = Some((pos, label));
            }
            break;
        }
    }
    best.map(|(_, l)| l)
}

pub fn parse_underling_reply(text: &str, labels: [&str; 2]) -> Result<UnderlingReply, GatewayError> {
    // Reasoning models may prepend a thinking block; the answer follows it.
    let body = text.rsplit_once("</think>").map_or(text, |(_, after)| after);
    for obj in json_objects(body) {
        if let Some(label) = lookup(&obj, &LABEL_KEYS).and_then(as_text).and_then(|v| match_label(&v, labels)) {
            let reasoning = lookup(&obj, &NARRATION_KEYS).and_then(as_text);
            return Ok(UnderlingReply { label: label.to_string(), reasoning, raw: text.to_string() });
        }
    }
    match first_standalone(body, labels) {
        Some(label) => Ok(UnderlingReply { label: label.to_string(), reasoning: None, raw: text.to_string() }),
        None => Err(GatewayError::Parse { reason: "no permitted label in reply".into(), raw: text.to_string() }),
    }
}
