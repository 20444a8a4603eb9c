use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{count_tokens, estimate_usage, ChatBackend, ChatRequest, ChatResponse};
use crate::domain::TokenUsage;
use crate::error::BackendError;

pub const API_KEY_ENV: &str = "LICH_API_KEY";
pub const BASE_URL_ENV: &str = "LICH_BASE_URL";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    /// Model name sent on the wire; the request's model tag when unset.
    pub model: Option<String>,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
    /// Forward the request seed to the server. Off by default: live runs
    /// sample unseeded, and the seed only keys recorded exchanges.
    pub send_seed: bool,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: None,
            max_in_flight: 8,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(8),
            timeout: Duration::from_secs(120),
            send_seed: false,
        }
    }

    /// Reads `LICH_BASE_URL` (required) and `LICH_API_KEY` (optional).
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(BASE_URL_ENV)
            .map_err(|_| BackendError::Config(format!("{BASE_URL_ENV} is not set")))?;
        let mut cfg = Self::new(base);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.min(16);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("in-flight lock");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for OpenAI-compatible `/v1/chat/completions` servers.
pub struct HttpBackend {
    id: String,
    config: HttpConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .new_agent();
        Self {
            id: format!("http:{}", config.base_url),
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            agent,
        }
    }

    /// Request body in the `/v1/chat/completions` wire format.
    pub fn wire_body(&self, req: &ChatRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model.as_deref().unwrap_or(&req.model_tag),
            "messages": req.messages.iter().map(|m| json!({
                "role": m.role.as_str(),
                "content": m.content,
            })).collect::<Vec<_>>(),
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let (true, Some(seed)) = (self.config.send_seed, req.seed) {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &str) -> Result<(String, Option<WireUsage>), Attempt> {
        let mut call = self
            .agent
            .post(self.config.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call.send(body).map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(Attempt::Fatal(format!("authentication failed ({status})"))),
            408 | 429 | 500..=599 => return Err(Attempt::Retry(format!("status {status}"))),
            _ => return Err(Attempt::Fatal(format!("status {status}: {text}"))),
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(format!("malformed response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal("response has no message content".into()))?;
        Ok((content, parsed.usage))
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let body = self.wire_body(req).to_string();
        let _slot = self.in_flight.acquire();
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok((content, usage)) => {
                    let fallback = estimate_usage(&req.messages, &content);
                    let usage = match usage {
                        Some(u) => TokenUsage {
                            prompt_tokens: u.prompt_tokens.unwrap_or(fallback.prompt_tokens),
                            completion_tokens: u
                                .completion_tokens
                                .unwrap_or_else(|| count_tokens(&content)),
                        },
                        None => fallback,
                    };
                    return Ok(ChatResponse { content, usage, backend_id: self.id.clone() });
                }
                Err(Attempt::Fatal(msg)) => return Err(BackendError::Unavailable(msg)),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{}: attempt {} failed: {msg}", self.id, attempt + 1);
                    last = msg;
                }
            }
        }
        Err(BackendError::Unavailable(format!(
            "gave up after {} attempts: {last}",
            self.config.max_attempts
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SamplingParams;
    use crate::domain::ChatMessage;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Minimal HTTP/1.1 server answering queued (status, body) pairs and
    /// capturing the request headers and bodies it saw.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((headers, String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (addr, seen)
    }

    fn config(base: String) -> HttpConfig {
        let mut cfg = HttpConfig::new(base);
        cfg.api_key = Some("sk-test".into());
        cfg.initial_backoff = Duration::from_millis(1);
        cfg.max_backoff = Duration::from_millis(2);
        cfg.timeout = Duration::from_secs(5);
        cfg
    }

    fn request() -> ChatRequest {
        ChatRequest::new(
            vec![ChatMessage::system("be brief"), ChatMessage::user("2+2?")],
            &SamplingParams { temperature: 0.5, max_output_tokens: 16, model_tag: "m1".into() },
            Some(7),
        )
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"4"}}],"usage":{"prompt_tokens":11,"completion_tokens":1}}"#;

    #[test]
    fn posts_openai_wire_format_with_bearer_token() {
        let (base, seen) = serve(vec![(200, OK.into())]);
        let backend = HttpBackend::new(config(base));
        let resp = backend.complete(&request()).unwrap();
        assert_eq!(resp.content, "4");
        assert_eq!(resp.usage, TokenUsage { prompt_tokens: 11, completion_tokens: 1 });
        let seen = seen.lock().unwrap();
        let (headers, body) = &seen[0];
        assert!(headers.contains("authorization: Bearer sk-test") || headers.contains("Authorization: Bearer sk-test"));
        assert!(headers.starts_with("POST /v1/chat/completions"));
        let body: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(body["model"], "m1");
        assert!(body.get("seed").is_none());
        assert_eq!(body["max_tokens"], 16);
        assert_eq!(body["temperature"], 0.5);
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "2+2?");
    }

    #[test]
    fn seed_forwarded_only_when_enabled() {
        let (base, seen) = serve(vec![(200, OK.into())]);
        let mut cfg = config(base);
        cfg.send_seed = true;
        HttpBackend::new(cfg).complete(&request()).unwrap();
        let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0].1).unwrap();
        assert_eq!(body["seed"], 7);
    }

    #[test]
    fn retries_transient_failures() {
        let (base, seen) = serve(vec![(503, "{}".into()), (500, "{}".into()), (200, OK.into())]);
        let backend = HttpBackend::new(config(base));
        assert_eq!(backend.complete(&request()).unwrap().content, "4");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let replies = vec![(503, "{}".to_string()); 3];
        let (base, seen) = serve(replies);
        let backend = HttpBackend::new(config(base));
        assert!(matches!(backend.complete(&request()), Err(BackendError::Unavailable(_))));
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (base, seen) = serve(vec![(401, "{}".into())]);
        let backend = HttpBackend::new(config(base));
        assert!(matches!(backend.complete(&request()), Err(BackendError::Unavailable(_))));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn missing_usage_falls_back_to_local_count() {
        let body = r#"{"choices":[{"message":{"content":"four is the answer"}}]}"#;
        let (base, _) = serve(vec![(200, body.into())]);
        let resp = HttpBackend::new(config(base)).complete(&request()).unwrap();
        assert_eq!(resp.usage, TokenUsage { prompt_tokens: 3, completion_tokens: 4 });
    }

    #[test]
    fn backoff_is_capped() {
        let mut cfg = HttpConfig::new("http://x");
        cfg.initial_backoff = Duration::from_millis(100);
        cfg.max_backoff = Duration::from_millis(250);
        assert_eq!(cfg.backoff(0), Duration::from_millis(100));
        assert_eq!(cfg.backoff(1), Duration::from_millis(200));
        assert_eq!(cfg.backoff(5), Duration::from_millis(250));
    }
}
