//! Model endpoints: a chat-completions HTTP client and deterministic mocks.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bpe::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model_name: String,
    pub max_new_tokens: u32,
    pub timeout_secs: u64,
    pub max_parallel: usize,
    pub retries: u32,
    /// Dotted path to the reply text; numeric parts index arrays.
    pub response_path: String,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    /// Extra request field that carries the phrase token ids, for servers
    /// that accept them. Without it runs are tokenization-uncontrolled.
    pub token_ids_field: Option<String>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: String::new(),
            max_new_tokens: 256,
            timeout_secs: 60,
            max_parallel: 4,
            retries: 2,
            response_path: "choices.0.message.content".into(),
            api_key_env: None,
            token_ids_field: None,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_parallel == 0 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        if self.response_path.is_empty() {
            return Err(Error::Config("response_path is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizationControl {
    Controlled,
    Uncontrolled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub tokenization: TokenizationControl,
}

/// Anything that answers a single user message. Decoding is greedy.
pub trait ChatEndpoint: Send + Sync {
    fn query(&self, prompt: &str, phrase_ids: Option<&[TokenId]>) -> Result<Reply>;
}

pub struct HttpEndpoint {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpEndpoint {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Endpoint(e.to_string()))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        Ok(HttpEndpoint { cfg, client, api_key })
    }

    pub fn request_body(&self, prompt: &str, phrase_ids: Option<&[TokenId]>) -> (Value, TokenizationControl) {
        request_body(&self.cfg, prompt, phrase_ids)
    }

    fn attempt(&self, body: &Value) -> Result<String> {
        let mut req = self.client.post(&self.cfg.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Endpoint(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Endpoint(format!("HTTP {status}")));
        }
        let v: Value = resp.json().map_err(|e| Error::Endpoint(e.to_string()))?;
        extract_path(&v, &self.cfg.response_path)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Endpoint(format!("no text at {}", self.cfg.response_path)))
    }
}

pub fn request_body(
    cfg: &EndpointConfig,
    prompt: &str,
    phrase_ids: Option<&[TokenId]>,
) -> (Value, TokenizationControl) {
    let mut body = json!({
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
        "max_tokens": cfg.max_new_tokens,
    });
    let mut control = TokenizationControl::Uncontrolled;
    if let (Some(field), Some(ids)) = (&cfg.token_ids_field, phrase_ids) {
        body[field.as_str()] = json!(ids);
        control = TokenizationControl::Controlled;
    }
    (body, control)
}

impl ChatEndpoint for HttpEndpoint {
    fn query(&self, prompt: &str, phrase_ids: Option<&[TokenId]>) -> Result<Reply> {
        let (body, tokenization) = self.request_body(prompt, phrase_ids);
        let mut last = None;
        for attempt in 0..=self.cfg.retries {
            match self.attempt(&body) {
                Ok(text) => return Ok(Reply { text, tokenization }),
                Err(e) => {
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Endpoint("no attempts made".into())))
    }
}

pub fn extract_path<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, part| match part.parse::<usize>() {
        Ok(i) if cur.is_array() => cur.get(i),
        _ => cur.get(part),
    })
}

/// Pull the quoted phrase back out of a rendered prompt.
fn quoted(prompt: &str) -> &str {
    let mut it = prompt.splitn(3, '"');
    match (it.next(), it.next(), it.next()) {
        (Some(_), Some(inner), Some(_)) => inner,
        _ => prompt,
    }
}

/// Repeats the quoted phrase back.
pub struct EchoEndpoint;

impl ChatEndpoint for EchoEndpoint {
    fn query(&self, prompt: &str, _: Option<&[TokenId]>) -> Result<Reply> {
        Ok(Reply {
            text: format!("\"{}\" is not a term I recognise.", quoted(prompt)),
            tokenization: TokenizationControl::Uncontrolled,
        })
    }
}

/// Never repeats the phrase: every character is replaced.
pub struct ScramblerEndpoint;

impl ChatEndpoint for ScramblerEndpoint {
    fn query(&self, prompt: &str, _: Option<&[TokenId]>) -> Result<Reply> {
        let garbled: String = quoted(prompt).chars().map(|_| '?').collect();
        Ok(Reply {
            text: format!("You probably mean \"{garbled}\"."),
            tokenization: TokenizationControl::Uncontrolled,
        })
    }
}

/// Echoes only when the prompt starts with `repeat_on`, scrambles otherwise.
pub struct SelectiveEndpoint {
    pub repeat_on: String,
}

impl ChatEndpoint for SelectiveEndpoint {
    fn query(&self, prompt: &str, ids: Option<&[TokenId]>) -> Result<Reply> {
        if prompt.starts_with(&self.repeat_on) {
            EchoEndpoint.query(prompt, ids)
        } else {
            ScramblerEndpoint.query(prompt, ids)
        }
    }
}

/// Fails the first `failures` calls, then echoes.
pub struct FlakyEndpoint {
    pub failures: usize,
    calls: AtomicUsize,
}

impl FlakyEndpoint {
    pub fn new(failures: usize) -> Self {
        FlakyEndpoint {
            failures,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatEndpoint for FlakyEndpoint {
    fn query(&self, prompt: &str, ids: Option<&[TokenId]>) -> Result<Reply> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
            return Err(Error::Endpoint("mock failure".into()));
        }
        EchoEndpoint.query(prompt, ids)
    }
}

/// Always fails with the given phrase in the prompt, echoes otherwise.
pub struct FailOnEndpoint {
    pub phrase: String,
}

impl ChatEndpoint for FailOnEndpoint {
    fn query(&self, prompt: &str, ids: Option<&[TokenId]>) -> Result<Reply> {
        if quoted(prompt) == self.phrase {
            return Err(Error::Endpoint("mock failure".into()));
        }
        EchoEndpoint.query(prompt, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_shape() {
        let cfg = EndpointConfig {
            model_name: "m".into(),
            max_new_tokens: 32,
            ..Default::default()
        };
        let (body, c) = request_body(&cfg, "hi", Some(&[TokenId(5)]));
        assert_eq!(c, TokenizationControl::Uncontrolled);
        assert_eq!(
            body,
            json!({"model": "m", "messages": [{"role": "user", "content": "hi"}], "temperature": 0, "max_tokens": 32})
        );
        let cfg = EndpointConfig {
            token_ids_field: Some("phrase_ids".into()),
            ..cfg
        };
        let (body, c) = request_body(&cfg, "hi", Some(&[TokenId(5), TokenId(7)]));
        assert_eq!(c, TokenizationControl::Controlled);
        assert_eq!(body["phrase_ids"], json!([5, 7]));
    }

    #[test]
    fn path_lookup() {
        let v = json!({"choices": [{"message": {"content": "ok"}}]});
        assert_eq!(extract_path(&v, "choices.0.message.content"), Some(&json!("ok")));
        assert_eq!(extract_path(&v, "choices.1.message"), None);
        assert_eq!(extract_path(&json!({"0": 1}), "0"), Some(&json!(1)));
    }

    #[test]
    fn mocks() {
        let p = "What does \"サーミ能\" mean?";
        assert!(EchoEndpoint.query(p, None).unwrap().text.contains("サーミ能"));
        assert!(!ScramblerEndpoint.query(p, None).unwrap().text.contains("サーミ能"));
        let f = FlakyEndpoint::new(1);
        assert!(f.query(p, None).is_err());
        assert!(f.query(p, None).is_ok());
    }

    #[test]
    fn unreachable_url_fails_after_retries() {
        let cfg = EndpointConfig {
            url: "http://127.0.0.1:9/v1/chat/completions".into(),
            timeout_secs: 2,
            retries: 1,
            ..Default::default()
        };
        let ep = HttpEndpoint::new(cfg).unwrap();
        assert!(matches!(ep.query("x", None), Err(Error::Endpoint(_))));
    }
}
