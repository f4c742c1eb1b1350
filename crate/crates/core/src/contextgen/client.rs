//! Generator/judge client implementations.
//!
//! `HttpClient` speaks an OpenAI-style chat-completions endpoint with retry
//! and exponential backoff. `StubClient` is the deterministic offline stand-in
//! every test and the smoke pipeline run on.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

/// A text-completion backend: prompt in, reply out.
pub trait GeneratorClient: Send + Sync {
    /// Stable identifier (model name); used as `judge_id` on scores.
    fn name(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

fn default_api_key_env() -> String {
    "CODISTILL_API_KEY".to_string()
}

fn default_temperature() -> f64 {
    0.0
}

fn default_max_tokens() -> usize {
    1024
}

fn default_max_retries() -> usize {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_concurrency() -> usize {
    4
}

/// Endpoint configuration for [`HttpClient`]. The credential itself never
/// lives in the config file; only the name of the environment variable does.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientConfig {
    #[serde(default)]
    pub kind: ClientKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    /// Near-greedy by default so context generation stays reproducible.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Maximum in-flight requests when generating contexts for a corpus.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Optional JSON-lines transcript of every request/response pair.
    #[serde(default)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    #[default]
    Stub,
    Http,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            kind: ClientKind::Stub,
            endpoint: String::new(),
            model: "stub".into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_backoff_ms(),
            api_key_env: default_api_key_env(),
            concurrency: default_concurrency(),
            transcript: None,
        }
    }
}

impl ClientConfig {
    pub fn build(&self) -> Result<Box<dyn GeneratorClient>> {
        match self.kind {
            ClientKind::Stub => Ok(Box::new(StubClient::new(&self.model))),
            ClientKind::Http => Ok(Box::new(HttpClient::new(self.clone())?)),
        }
    }
}

struct Transcript {
    writer: Mutex<std::io::BufWriter<std::fs::File>>,
}

impl Transcript {
    fn open(path: &PathBuf) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Transcript {
            writer: Mutex::new(std::io::BufWriter::new(file)),
        })
    }

    fn record(&self, model: &str, prompt: &str, response: &str) {
        let line = json!({ "model": model, "prompt": prompt, "response": response });
        if let Ok(mut w) = self.writer.lock() {
            let _ = serde_json::to_writer(&mut *w, &line);
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    }
}

/// OpenAI-style chat-completions client with retry/backoff.
pub struct HttpClient {
    config: ClientConfig,
    api_key: String,
    transcript: Option<Transcript>,
}

impl HttpClient {
    pub fn new(config: ClientConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::config("client.endpoint is required for kind = \"http\""));
        }
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            Error::config(format!(
                "missing API credential: set the {} environment variable",
                config.api_key_env
            ))
        })?;
        let transcript = match &config.transcript {
            Some(path) => Some(Transcript::open(path)?),
            None => None,
        };
        Ok(HttpClient {
            config,
            api_key,
            transcript,
        })
    }

    fn request_once(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let response = ureq::post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .set("Content-Type", "application/json")
            .send_json(body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: serde_json::Value = response
            .into_json()
            .map_err(|e| Error::Transport(format!("invalid response body: {e}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::BadResponse("reply missing choices[0].message.content".into()))
    }
}

impl GeneratorClient for HttpClient {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let mut backoff = self.config.initial_backoff_ms;
        let mut last_err = None;
        for attempt in 0..=self.config.max_retries {
            match self.request_once(prompt) {
                Ok(reply) => {
                    if let Some(t) = &self.transcript {
                        t.record(self.name(), prompt, &reply);
                    }
                    return Ok(reply);
                }
                Err(err @ Error::Transport(_)) => {
                    log::warn!("attempt {}: {err}", attempt + 1);
                    last_err = Some(err);
                    if attempt < self.config.max_retries {
                        std::thread::sleep(std::time::Duration::from_millis(backoff));
                        backoff = backoff.saturating_mul(2);
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Transport("exhausted retries".into())))
    }
}

/// Deterministic offline client. Context prompts get a structured JSON
/// reply derived from the embedded question/solution without quoting code;
/// judge prompts get fixed in-range scores.
pub struct StubClient {
    name: String,
}

impl StubClient {
    pub fn new(name: &str) -> Self {
        StubClient { name: name.into() }
    }

    fn section<'a>(prompt: &'a str, header: &str, terminator: &str) -> Option<&'a str> {
        let start = prompt.find(header)? + header.len();
        let rest = &prompt[start..];
        let end = rest.find(terminator).unwrap_or(rest.len());
        Some(rest[..end].trim())
    }

    fn context_reply(prompt: &str) -> String {
        let question =
            Self::section(prompt, "Question:\n", "\n\nReference solution").unwrap_or("the task");
        let solution = Self::section(prompt, "```python\n", "\n```").unwrap_or("");
        let intent = question
            .split(['.', '?'])
            .next()
            .unwrap_or(question)
            .trim()
            .to_lowercase();
        let mut steps = vec![
            "Read the inputs exactly as named in the question.".to_string(),
            "Apply the single operation the question asks for.".to_string(),
            "Return the computed value without extra output.".to_string(),
        ];
        for builtin in ["max", "min", "len", "abs", "sum", "sorted", "set"] {
            if solution.contains(&format!("{builtin}(")) {
                steps.push(format!(
                    "The built-in {builtin} keeps the solution short and readable."
                ));
            }
        }
        json!({
            "intent": format!("The question asks to {intent}."),
            "steps": steps,
            "formulas": [],
            "edge_cases": ["Boundary inputs such as zero or an empty collection."],
            "library_notes": [],
        })
        .to_string()
    }
}

impl GeneratorClient for StubClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.starts_with("Rate the following") {
            return Ok("7 / 9".to_string());
        }
        Ok(Self::context_reply(prompt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// One-shot HTTP server answering each connection from a scripted list
    /// of (status, body) pairs.
    fn spawn_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                let mut stream = reader.into_inner();
                let reason = if status == 200 { "OK" } else { "Server Error" };
                write!(
                    stream,
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn ok_body(content: &str) -> String {
        json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })
            .to_string()
    }

    fn config(endpoint: &str) -> ClientConfig {
        ClientConfig {
            kind: ClientKind::Http,
            endpoint: endpoint.to_string(),
            model: "test-model".into(),
            initial_backoff_ms: 1,
            max_retries: 2,
            api_key_env: "CODISTILL_TEST_KEY".into(),
            ..ClientConfig::default()
        }
    }

    #[test]
    fn http_client_round_trip_and_retry() {
        std::env::set_var("CODISTILL_TEST_KEY", "k");
        let (endpoint, handle) = spawn_server(vec![
            (500, "{}".into()),
            (200, ok_body("hello there")),
        ]);
        let client = HttpClient::new(config(&endpoint)).unwrap();
        let reply = client.complete("hi").unwrap();
        assert_eq!(reply, "hello there");
        handle.join().unwrap();
    }

    #[test]
    fn http_client_exhausts_retries() {
        std::env::set_var("CODISTILL_TEST_KEY", "k");
        let (endpoint, handle) = spawn_server(vec![
            (500, "{}".into()),
            (500, "{}".into()),
            (500, "{}".into()),
        ]);
        let client = HttpClient::new(config(&endpoint)).unwrap();
        let err = client.complete("hi").unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        handle.join().unwrap();
    }

    #[test]
    fn missing_credential_is_actionable() {
        std::env::remove_var("CODISTILL_MISSING_KEY");
        let mut cfg = config("http://127.0.0.1:1/unused");
        cfg.api_key_env = "CODISTILL_MISSING_KEY".into();
        let Err(err) = HttpClient::new(cfg) else {
            panic!("expected missing-credential error");
        };
        let msg = err.to_string();
        assert!(msg.contains("CODISTILL_MISSING_KEY"), "{msg}");
    }

    #[test]
    fn transcript_records_exchanges() {
        std::env::set_var("CODISTILL_TEST_KEY", "k");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        let (endpoint, handle) = spawn_server(vec![(200, ok_body("pong"))]);
        let mut cfg = config(&endpoint);
        cfg.transcript = Some(path.clone());
        let client = HttpClient::new(cfg).unwrap();
        client.complete("ping").unwrap();
        handle.join().unwrap();
        let line = std::fs::read_to_string(path).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["prompt"], "ping");
        assert_eq!(v["response"], "pong");
    }
}
