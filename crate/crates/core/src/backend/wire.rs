//! Chat-completion client for a hosted vision-language model.
//!
//! Auth comes only from the environment. Failed calls are retried with the
//! request body unchanged; concurrency is bounded by an in-flight gate.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendDescriptor, BackendError, BackendKind, Capability, GenerationRequest};
use crate::seed::derive_seed;

pub const API_KEY_ENV: &str = "DGREASON_API_KEY";
pub const ENDPOINT_ENV: &str = "DGREASON_ENDPOINT";
pub const ATTEMPT_HEADER: &str = "X-Request-Attempt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub max_in_flight: usize,
    /// Base delay before a retry; doubles per attempt.
    pub backoff_ms: u64,
    pub request_logprobs: bool,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            timeout_secs: 60,
            max_attempts: 3,
            max_in_flight: 4,
            backoff_ms: 500,
            request_logprobs: false,
        }
    }
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct WireBackend {
    config: WireConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

impl std::fmt::Debug for WireBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<set>"))
            .finish()
    }
}

enum Failure {
    Retry(String),
    RateLimited,
    Fatal(BackendError),
}

impl WireBackend {
    pub fn new(config: WireConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(BackendError::InvalidRequest(
                "max_attempts and max_in_flight must be >= 1".into(),
            ));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            gate: Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit: config.max_in_flight,
            },
            config,
            api_key,
            agent,
        })
    }

    /// Reads the API key (and optionally the endpoint) from the environment.
    pub fn from_env(mut config: WireConfig) -> Result<Self, BackendError> {
        if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
            if !endpoint.trim().is_empty() {
                config.endpoint = endpoint;
            }
        }
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }

    pub fn config(&self) -> &WireConfig {
        &self.config
    }

    fn image_url(image_ref: &str) -> Result<String, BackendError> {
        if ["http://", "https://", "data:"]
            .iter()
            .any(|p| image_ref.starts_with(p))
        {
            return Ok(image_ref.to_string());
        }
        let bytes = std::fs::read(image_ref).map_err(|e| BackendError::ImageUnavailable {
            image_ref: image_ref.to_string(),
            message: e.to_string(),
        })?;
        let ext = Path::new(image_ref)
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let mime = match ext.as_deref() {
            Some("png") => "image/png",
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "application/octet-stream",
        };
        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(format!("data:{mime};base64,{encoded}"))
    }

    fn body(&self, request: &GenerationRequest, image_url: &str, n: usize, seed: u64) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": request.prompt},
                    {"type": "image_url", "image_url": {"url": image_url}},
                ],
            }],
            "temperature": request.temperature,
            "n": n,
            "max_tokens": request.max_tokens,
            "seed": seed,
        });
        if self.config.request_logprobs {
            body["logprobs"] = json!(true);
        }
        body
    }

    fn attempt(&self, body: &Value, attempt: u32) -> Result<Value, Failure> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header(ATTEMPT_HEADER, attempt.to_string());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| Failure::Retry(format!("unreadable response body: {e}"))),
            429 => Err(Failure::RateLimited),
            500..=599 => Err(Failure::Retry(format!("server error {status}"))),
            _ => {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                Err(Failure::Fatal(BackendError::InvalidRequest(format!(
                    "status {status}: {}",
                    text.chars().take(300).collect::<String>()
                ))))
            }
        }
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.gate.acquire();
        let mut last = Failure::Retry(String::new());
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 && self.config.backoff_ms > 0 {
                let delay = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 2).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(body, attempt) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(f) => last = f,
            }
        }
        let attempts = self.config.max_attempts;
        Err(match last {
            Failure::RateLimited => BackendError::RateLimited { attempts },
            Failure::Retry(message) => BackendError::BackendUnavailable { attempts, message },
            Failure::Fatal(e) => e,
        })
    }
}

fn choice_text(choice: &Value) -> Option<String> {
    match &choice["message"]["content"] {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

/// Candidate texts ordered by choice index.
fn parse_choices(response: &Value) -> Result<Vec<String>, BackendError> {
    let choices =
        response["choices"]
            .as_array()
            .ok_or_else(|| BackendError::BackendUnavailable {
                attempts: 1,
                message: "response has no choices array".into(),
            })?;
    let mut indexed: Vec<(u64, String)> = choices
        .iter()
        .enumerate()
        .filter_map(|(pos, c)| {
            let idx = c["index"].as_u64().unwrap_or(pos as u64);
            choice_text(c).map(|t| (idx, t))
        })
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, t)| t).collect())
}

impl Backend for WireBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Wire,
            endpoint: Some(self.config.endpoint.clone()),
            model_name: self.config.model.clone(),
            capabilities: [Capability::Generate].into_iter().collect(),
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        request.validate()?;
        let image_url = Self::image_url(&request.image_ref)?;
        let mut out = Vec::with_capacity(request.num_candidates);
        while out.len() < request.num_candidates {
            let missing = request.num_candidates - out.len();
            let seed = if out.is_empty() {
                request.seed
            } else {
                derive_seed(request.seed, &[&out.len()])
            };
            let body = self.body(request, &image_url, missing, seed);
            let got = parse_choices(&self.post(&body)?)?;
            if got.is_empty() {
                return Err(BackendError::CandidateCount {
                    expected: request.num_candidates,
                    got: out.len(),
                });
            }
            out.extend(got.into_iter().take(missing));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    #[derive(Debug, Clone)]
    struct Seen {
        headers: Vec<String>,
        body: Value,
    }

    /// Serves one scripted `(status, body)` per connection.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (status, body) in script {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end().to_string();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push(line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(Seen {
                    headers,
                    body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
                });
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
        });
        (url, seen)
    }

    fn choices(texts: &[&str]) -> String {
        let cs: Vec<Value> = texts
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| json!({"index": i, "message": {"role": "assistant", "content": t}}))
            .collect();
        json!({ "choices": cs }).to_string()
    }

    fn backend(url: String) -> WireBackend {
        WireBackend::new(
            WireConfig {
                endpoint: url,
                backoff_ms: 0,
                timeout_secs: 5,
                ..WireConfig::default()
            },
            Some("k".into()),
        )
        .unwrap()
    }

    fn req(n: usize) -> GenerationRequest {
        GenerationRequest {
            image_ref: "data:image/png;base64,AAAA".into(),
            prompt: "describe".into(),
            num_candidates: n,
            temperature: 0.7,
            max_tokens: 64,
            seed: 3,
        }
    }

    #[test]
    fn retries_then_succeeds_with_identical_body() {
        let (url, seen) = serve(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, choices(&["a", "b"])),
        ]);
        let out = backend(url).generate(&req(2)).unwrap();
        assert_eq!(out, ["a", "b"]);
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().all(|s| s.body == seen[0].body));
        assert_eq!(seen[0].body["n"], 2);
        assert_eq!(
            seen[0].body["messages"][0]["content"][1]["type"],
            "image_url"
        );
        let attempt = |s: &Seen| {
            s.headers
                .iter()
                .find(|h| {
                    h.to_ascii_lowercase()
                        .starts_with(&ATTEMPT_HEADER.to_ascii_lowercase())
                })
                .cloned()
                .unwrap()
        };
        assert!(attempt(&seen[2]).ends_with('3'));
        assert!(seen[0]
            .headers
            .iter()
            .any(|h| h == "authorization: Bearer k" || h == "Authorization: Bearer k"));
    }

    #[test]
    fn rate_limit_exhausts_attempts() {
        let (url, seen) = serve(vec![(429, "{}".into()); 3]);
        let err = backend(url).generate(&req(1)).unwrap_err();
        assert!(matches!(err, BackendError::RateLimited { attempts: 3 }));
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, seen) = serve(vec![
            (400, "{\"error\":\"bad\"}".into()),
            (200, choices(&["x"])),
        ]);
        let err = backend(url).generate(&req(1)).unwrap_err();
        assert!(matches!(err, BackendError::InvalidRequest(_)));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn tops_up_short_responses() {
        let (url, seen) = serve(vec![(200, choices(&["a"])), (200, choices(&["b", "c"]))]);
        let out = backend(url).generate(&req(3)).unwrap();
        assert_eq!(out, ["a", "b", "c"]);
        assert_eq!(seen.lock().unwrap()[1].body["n"], 2);
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/x", listener.local_addr().unwrap());
        drop(listener);
        let err = backend(url).generate(&req(1)).unwrap_err();
        assert!(matches!(
            err,
            BackendError::BackendUnavailable { attempts: 3, .. }
        ));
    }

    #[test]
    fn missing_image_file() {
        let b = backend("http://127.0.0.1:1/".into());
        let mut r = req(1);
        r.image_ref = "/nonexistent/img.png".into();
        assert!(matches!(
            b.generate(&r),
            Err(BackendError::ImageUnavailable { .. })
        ));
    }

    #[test]
    fn debug_hides_key() {
        let b = backend("http://127.0.0.1:1/".into());
        assert!(!format!("{b:?}").contains("\"k\""));
    }
}
