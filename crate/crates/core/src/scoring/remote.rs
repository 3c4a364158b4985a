use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{BackendKind, Result, ScoreError, Scorer, SequenceScore, TokenScore};
use crate::num::Scalar;

/// Environment variable holding the completion endpoint URL.
pub const ENDPOINT_ENV: &str = "CONE_ENDPOINT";
/// Environment variable holding a bearer token for the endpoint.
pub const API_KEY_ENV: &str = "CONE_API_KEY";

/// Base of the log-probabilities a server reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    /// Converts a log-probability in this base to an nll in nats.
    pub fn to_nats(self, logprob: f64) -> f64 {
        match self {
            LogBase::Natural => -logprob,
            LogBase::Two => -logprob * std::f64::consts::LN_2,
            LogBase::Ten => -logprob * std::f64::consts::LN_10,
        }
    }
}

impl std::fmt::Display for LogBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LogBase::Natural => "e",
            LogBase::Two => "2",
            LogBase::Ten => "10",
        })
    }
}

impl FromStr for LogBase {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e" | "natural" | "nats" => Ok(LogBase::Natural),
            "2" | "bits" => Ok(LogBase::Two),
            "10" => Ok(LogBase::Ten),
            _ => Err(ScoreError::InvalidConfig(format!("unknown log base {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Full URL of the completions route.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub log_base: LogBase,
    /// Retries after the first attempt for transport errors, 429 and 5xx.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            log_base: LogBase::Natural,
            max_retries: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(120),
            max_in_flight: 4,
        }
    }

    /// Reads the endpoint and key from the environment. An explicit
    /// `endpoint` takes precedence over the variable.
    pub fn from_env(endpoint: Option<&str>, model: impl Into<String>) -> Result<Self> {
        let endpoint = match endpoint {
            Some(e) => e.to_string(),
            None => std::env::var(ENDPOINT_ENV).map_err(|_| {
                ScoreError::InvalidConfig(format!("no endpoint given and {ENDPOINT_ENV} is unset"))
            })?,
        };
        let mut config = Self::new(endpoint, model);
        config.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(config)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cond.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}

/// Client for a completions endpoint that echoes prompt log-probabilities.
pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
    slots: Semaphore,
    model_id: String,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(ScoreError::InvalidConfig("empty endpoint".into()));
        }
        if config.max_in_flight == 0 {
            return Err(ScoreError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Ok(Self {
            model_id: format!("remote:{}@{}", config.model, config.endpoint),
            slots: Semaphore {
                free: Mutex::new(config.max_in_flight),
                cond: Condvar::new(),
            },
            config,
            agent,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post(&self, body: &serde_json::Value) -> Result<String> {
        let _permit = self.slots.acquire();
        let mut attempt = 0u32;
        let mut delay = self.config.backoff;
        loop {
            attempt += 1;
            let mut request = self.agent.post(&self.config.endpoint);
            if let Some(key) = &self.config.api_key {
                request = request.header("Authorization", format!("Bearer {key}"));
            }
            let retryable = match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    match response.body_mut().read_to_string() {
                        Ok(text) if (200..300).contains(&status) => return Ok(text),
                        Ok(text) if status == 429 || status >= 500 => {
                            format!("status {status}: {}", snippet(&text))
                        }
                        Ok(text) if is_overflow(status, &text) => {
                            return Err(ScoreError::ContextOverflow(snippet(&text)))
                        }
                        Ok(text) => {
                            return Err(ScoreError::Http {
                                status,
                                body: snippet(&text),
                            })
                        }
                        Err(e) => e.to_string(),
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempt > self.config.max_retries {
                return Err(ScoreError::Transport {
                    attempts: attempt,
                    message: retryable,
                });
            }
            log::warn!("request attempt {attempt} failed ({retryable}); retrying in {delay:?}");
            std::thread::sleep(delay);
            delay *= 2;
        }
    }

    fn first_choice(&self, body: &serde_json::Value) -> Result<Choice> {
        let text = self.post(body)?;
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| ScoreError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ScoreError::Malformed("no choices".into()))
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

fn is_overflow(status: u16, body: &str) -> bool {
    let lower = body.to_lowercase();
    matches!(status, 400 | 413)
        && (lower.contains("context") || lower.contains("too long") || lower.contains("maximum"))
}

/// Checks that `tokens` tile `text` exactly and returns their byte spans.
fn token_spans(text: &str, lp: &Logprobs) -> Result<Vec<std::ops::Range<usize>>> {
    if lp.tokens.len() != lp.token_logprobs.len() {
        return Err(ScoreError::Malformed(format!(
            "{} tokens but {} log-probabilities",
            lp.tokens.len(),
            lp.token_logprobs.len()
        )));
    }
    let mut spans = Vec::with_capacity(lp.tokens.len());
    let mut pos = 0;
    for tok in &lp.tokens {
        if !text[pos..].starts_with(tok.as_str()) {
            return Err(ScoreError::Malformed(format!(
                "token {tok:?} does not match the text at byte {pos}"
            )));
        }
        spans.push(pos..pos + tok.len());
        pos += tok.len();
    }
    if pos != text.len() {
        return Err(ScoreError::Malformed(format!(
            "tokens cover {pos} of {} bytes",
            text.len()
        )));
    }
    if let Some(offsets) = &lp.text_offset {
        // Servers report byte or character offsets; accept either.
        let ok = offsets.len() == spans.len()
            && spans.iter().zip(offsets).all(|(s, &o)| {
                o == s.start || o == text[..s.start].chars().count()
            });
        if !ok {
            return Err(ScoreError::Malformed("text offsets disagree with tokens".into()));
        }
    }
    Ok(spans)
}

impl<F: Scalar> Scorer<F> for RemoteScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RemoteHttp
    }

    fn score_sequence(&self, text: &str) -> Result<SequenceScore<F>> {
        if text.is_empty() {
            return Ok(SequenceScore::empty());
        }
        let body = json!({
            "model": self.config.model,
            "prompt": text,
            "echo": true,
            "max_tokens": 0,
            "logprobs": 1,
            "temperature": 0,
        });
        let choice = self.first_choice(&body)?;
        let lp = choice
            .logprobs
            .ok_or_else(|| ScoreError::Malformed("response lacks logprobs".into()))?;
        let spans = token_spans(text, &lp)?;
        let mut tokens = Vec::with_capacity(spans.len());
        for (i, (span, logprob)) in spans.into_iter().zip(&lp.token_logprobs).enumerate() {
            // The first token has no preceding context; servers report null.
            let nll = match logprob {
                Some(v) => self.config.log_base.to_nats(*v),
                None if i == 0 => 0.0,
                None => {
                    return Err(ScoreError::Malformed(format!(
                        "null log-probability at token {i}"
                    )))
                }
            };
            if !nll.is_finite() {
                return Err(ScoreError::NonFinite(lp.tokens[i].clone()));
            }
            tokens.push(TokenScore {
                text: lp.tokens[i].clone(),
                span,
                nll: F::of(nll),
            });
        }
        Ok(SequenceScore::from_tokens(tokens))
    }

    fn generate(&self, prompt: &str, max_tokens: usize, stop: &str) -> Result<String> {
        if max_tokens == 0 {
            return Err(ScoreError::InvalidConfig("generation needs max_tokens > 0".into()));
        }
        let mut body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "echo": false,
            "max_tokens": max_tokens,
            "temperature": 0,
        });
        if !stop.is_empty() {
            body["stop"] = json!([stop]);
        }
        let choice = self.first_choice(&body)?;
        let text = choice
            .text
            .ok_or_else(|| ScoreError::Malformed("response lacks completion text".into()))?;
        Ok(match (stop.is_empty(), text.find(stop)) {
            (false, Some(i)) => text[..i].to_string(),
            _ => text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(tokens: &[&str], offsets: Option<Vec<usize>>) -> Logprobs {
        Logprobs {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            token_logprobs: vec![Some(-1.0); tokens.len()],
            text_offset: offsets,
        }
    }

    #[test]
    fn log_base_conversion() {
        assert_eq!(LogBase::Natural.to_nats(-0.5), 0.5);
        assert!((LogBase::Two.to_nats(-1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((LogBase::Ten.to_nats(-2.0) - 100f64.ln()).abs() < 1e-12);
        assert_eq!("bits".parse::<LogBase>().unwrap(), LogBase::Two);
        assert!("3".parse::<LogBase>().is_err());
    }

    #[test]
    fn spans_must_tile_text() {
        assert_eq!(token_spans("ab c", &lp(&["ab", " c"], None)).unwrap(), vec![0..2, 2..4]);
        assert!(token_spans("ab c", &lp(&["ab", " "], None)).is_err());
        assert!(token_spans("ab c", &lp(&["a", " c"], None)).is_err());
        assert!(token_spans("é x", &lp(&["é", " x"], Some(vec![0, 1]))).is_ok());
        assert!(token_spans("é x", &lp(&["é", " x"], Some(vec![0, 2]))).is_ok());
        assert!(token_spans("é x", &lp(&["é", " x"], Some(vec![0, 3]))).is_err());
    }

    #[test]
    fn overflow_detection() {
        assert!(is_overflow(400, "This model's maximum context length is 2048"));
        assert!(!is_overflow(400, "bad json"));
        assert!(!is_overflow(500, "context"));
    }
}
