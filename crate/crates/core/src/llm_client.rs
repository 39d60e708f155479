//! Blocking client for OpenAI-compatible chat-completion endpoints, plus the
//! faithfulness judge built on it.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::Label;
use crate::error::{Error, Result};

pub const JUDGE_PROMPT: &str = "You will be given a document and a summary. Your task is to determine whether the summary is faithful or unfaithful to the information provided in the document. If the summary contains any statements that contradict the information given in the document, or if it includes information not present or implied by the document, reply 'unfaithful'. Otherwise, reply 'faithful'.";

pub const JUDGE_TEMPERATURE: f64 = 0.0;
pub const INJECTION_TEMPERATURE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub base_url: String,
    pub model: String,
    /// Overrides the per-task default when set.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    /// Whitespace tokens of the document kept in judge prompts.
    #[serde(default = "default_budget")]
    pub judge_token_budget: usize,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    5
}
fn default_in_flight() -> usize {
    4
}
fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_backoff() -> u64 {
    1000
}
fn default_budget() -> usize {
    12_000
}

impl ClientConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ClientConfig {
            base_url: base_url.into(),
            model: model.into(),
            temperature: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            api_key_env: default_key_env(),
            backoff_base_ms: default_backoff(),
            judge_token_budget: default_budget(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max in-flight requests must be ≥ 1".into()));
        }
        if self.judge_token_budget == 0 {
            return Err(Error::Config("judge token budget must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Something that answers a system + user prompt pair.
pub trait ChatModel: Sync {
    fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String>;

    /// Temperature override from configuration, if any.
    fn temperature_override(&self) -> Option<f64> {
        None
    }
}

pub struct LlmClient {
    cfg: ClientConfig,
    token: String,
    agent: ureq::Agent,
}

enum Attempt {
    Done(String),
    Retry(String),
}

impl LlmClient {
    /// Reads the bearer token from the configured environment variable.
    pub fn from_env(cfg: ClientConfig) -> Result<Self> {
        let token = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::MissingCredential(cfg.api_key_env.clone()))?;
        Self::with_token(cfg, token)
    }

    pub fn with_token(cfg: ClientConfig, token: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(LlmClient {
            cfg,
            token: token.into(),
            agent,
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str) -> Result<Attempt> {
        let url = self.url();
        log::debug!("POST {url} authorization: Bearer [redacted] body: {body}");
        let sent = self
            .agent
            .post(&url)
            .header("Authorization", format!("Bearer {}", self.token))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match sent {
            Ok(r) => r,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                return Ok(Attempt::Retry(e.to_string()))
            }
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_))) => return Ok(Attempt::Retry(e.to_string())),
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        log::debug!("status {status} body: {text}");
        if status == 429 || status >= 500 {
            return Ok(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Error::HttpStatus {
                status,
                body: text.chars().take(300).collect(),
            });
        }
        Ok(Attempt::Done(parse_reply(&text)?))
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.cfg.backoff_base_ms as f64 * 2f64.powi(retry as i32);
        let jitter = rand::rng().random_range(0.0..0.25);
        Duration::from_secs_f64(base * (1.0 + jitter) / 1000.0)
    }
}

/// First choice's message content of a chat-completions response body.
pub fn parse_reply(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Protocol(format!("malformed response JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| Error::Protocol("response has no choices[0].message.content".into()))?;
    if content.trim().is_empty() {
        return Err(Error::Protocol("empty reply".into()));
    }
    Ok(content.to_string())
}

impl ChatModel for LlmClient {
    fn complete(&self, system: &str, user: &str, temperature: f64) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": temperature,
        })
        .to_string();
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.backoff(attempt - 1);
                log::warn!("retrying chat request ({last}), attempt {attempt}, waiting {wait:?}");
                std::thread::sleep(wait);
            }
            match self.attempt(&body)? {
                Attempt::Done(reply) => return Ok(reply),
                Attempt::Retry(why) => last = why,
            }
        }
        Err(Error::Transport(format!(
            "retries exhausted after {} attempts: {last}",
            self.cfg.max_retries + 1
        )))
    }

    fn temperature_override(&self) -> Option<f64> {
        self.cfg.temperature
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: Label,
    /// Whether the document was cut to fit the token budget.
    pub truncated: bool,
    pub raw: String,
}

/// `"unfaithful"` is checked first since it contains `"faithful"`.
pub fn parse_verdict(reply: &str) -> Result<Label> {
    let lower = reply.to_lowercase();
    if lower.contains("unfaithful") {
        Ok(Label::Hallucinated)
    } else if lower.contains("faithful") {
        Ok(Label::Faithful)
    } else {
        Err(Error::UnparseableVerdict { raw: reply.to_string() })
    }
}

/// Keeps the first `budget` whitespace-separated tokens of `text`.
pub fn truncate_tokens(text: &str, budget: usize) -> (&str, bool) {
    match text.split_whitespace().nth(budget) {
        None => (text, false),
        Some(first_dropped) => {
            let cut = first_dropped.as_ptr() as usize - text.as_ptr() as usize;
            (text[..cut].trim_end(), true)
        }
    }
}

pub fn judge(model: &impl ChatModel, context: &str, response: &str, token_budget: usize) -> Result<JudgeVerdict> {
    let (doc, truncated) = truncate_tokens(context, token_budget);
    let user = format!("Document:\n{doc}\n\nSummary:\n{response}");
    let temperature = model.temperature_override().unwrap_or(JUDGE_TEMPERATURE);
    let raw = model.complete(JUDGE_PROMPT, &user, temperature)?;
    Ok(JudgeVerdict {
        label: parse_verdict(&raw)?,
        truncated,
        raw,
    })
}
