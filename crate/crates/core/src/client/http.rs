//! Chat-completions transport with bounded retries.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::RenderedPrompt;
use crate::error::TransportError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based), with jitter in [50%, 100%].
    pub fn backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(20));
        let capped = exp.min(self.max_delay_ms);
        let jitter: f64 = rng.random_range(0.5..=1.0);
        Duration::from_millis((capped as f64 * jitter) as u64)
    }
}

/// Outcome of one logical request after retries.
#[derive(Debug)]
pub enum Exchange {
    Answered { content: String, attempts: u32 },
    /// Retries exhausted on throttle/server errors, or a non-retryable
    /// client error. Recorded as an incorrect answer.
    Failed { error: TransportError, attempts: u32 },
    /// Never reached the endpoint. Not recorded; the cell stays missing.
    Unreachable { error: TransportError, attempts: u32 },
}

pub fn request_body(model: &str, prompt: &RenderedPrompt, max_tokens: u32, extra: Option<&Value>) -> Value {
    let mut messages = Vec::with_capacity(2);
    if let Some(sys) = &prompt.system {
        messages.push(json!({"role": "system", "content": sys}));
    }
    messages.push(json!({"role": "user", "content": prompt.user}));
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": 0,
        "max_tokens": max_tokens,
    });
    if let (Some(Value::Object(extra)), Value::Object(obj)) = (extra, &mut body) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    body
}

pub fn parse_content(body: &str) -> Result<String, TransportError> {
    let v: Value = serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let msg = v
        .pointer("/choices/0/message")
        .ok_or_else(|| TransportError::Malformed("missing choices[0].message".into()))?;
    Ok(match msg.get("content") {
        Some(Value::String(s)) => s.clone(),
        // Refusals and filtered completions can come back with null content.
        _ => String::new(),
    })
}

pub fn completions_url(endpoint: &str) -> String {
    format!("{}/chat/completions", endpoint.trim_end_matches('/'))
}

pub fn send_once(
    http: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
) -> Result<String, TransportError> {
    let mut req = http.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| TransportError::Unreachable(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.text().map_err(|e| TransportError::Unreachable(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(TransportError::Status {
            status,
            body: text.chars().take(200).collect(),
        });
    }
    parse_content(&text)
}

/// Send with exponential backoff until success, a terminal error, or the
/// attempt limit.
pub fn send_with_retry(
    http: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
    before_attempt: &dyn Fn(),
) -> Exchange {
    let mut rng = rand::rng();
    let max = policy.max_attempts.max(1);
    let mut reached = false;
    let mut attempt = 0;
    loop {
        attempt += 1;
        before_attempt();
        match send_once(http, url, api_key, body) {
            Ok(content) => return Exchange::Answered { content, attempts: attempt },
            Err(error) => {
                if !matches!(error, TransportError::Unreachable(_)) {
                    reached = true;
                }
                if !error.is_retryable() || attempt >= max {
                    return if reached {
                        Exchange::Failed { error, attempts: attempt }
                    } else {
                        Exchange::Unreachable { error, attempts: attempt }
                    };
                }
                log::debug!("{url}: attempt {attempt} failed: {error}");
                std::thread::sleep(policy.backoff(attempt, &mut rng));
            }
        }
    }
}
