//! Minimal chat-completion client used by the LLM extraction and chaining
//! backends.

use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "SKILLCHAIN_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "SKILLCHAIN_LLM_MODEL";
pub const ENV_API_KEY: &str = "SKILLCHAIN_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("LLM transport error: {0}")]
    Transport(String),
}

/// One prompt in, one completion out.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }
}

#[derive(Clone)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl fmt::Debug for LlmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl LlmConfig {
    /// Reads endpoint, model and key from the environment. Returns `None`
    /// when no endpoint is configured.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        Some(LlmConfig {
            endpoint,
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o".into()),
            api_key: std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty()),
            timeout: Duration::from_secs(60),
        })
    }
}

/// OpenAI-style `chat/completions` client. Calls through one instance are
/// serialized.
pub struct HttpChatClient {
    config: LlmConfig,
    http: reqwest::blocking::Client,
    gate: Mutex<()>,
}

impl fmt::Debug for HttpChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatClient").field("config", &self.config).finish()
    }
}

impl HttpChatClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpChatClient { config, http, gate: Mutex::new(()) })
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let _serial = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_connect() || e.is_timeout() {
                LlmError::Unavailable(e.without_url().to_string())
            } else {
                LlmError::Transport(e.without_url().to_string())
            }
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(LlmError::Unavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        let value: Value = resp.json().map_err(|e| LlmError::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| LlmError::Transport("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response and returns the request body it saw.
    fn one_shot(status: &str, body: &'static str) -> (String, std::thread::JoinHandle<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let status = status.to_owned();
        let handle = std::thread::spawn(move || {
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
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            (headers, String::from_utf8(buf).unwrap())
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn config(endpoint: String) -> LlmConfig {
        LlmConfig {
            endpoint,
            model: "test-model".into(),
            api_key: Some("sk-secret".into()),
            timeout: Duration::from_secs(5),
        }
    }

    #[test]
    fn sends_chat_request_and_reads_content() {
        let (url, server) = one_shot("200 OK", r#"{"choices":[{"message":{"role":"assistant","content":"cut\ninstall"}}]}"#);
        let client = HttpChatClient::new(config(url)).unwrap();
        assert_eq!(client.complete("hello").unwrap(), "cut\ninstall");
        let (headers, body) = server.join().unwrap();
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer sk-secret"));
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "test-model");
        assert_eq!(v["messages"][0]["content"], "hello");
    }

    #[test]
    fn server_errors_map_to_unavailable() {
        let (url, server) = one_shot("503 Service Unavailable", "{}");
        let client = HttpChatClient::new(config(url)).unwrap();
        assert!(matches!(client.complete("x"), Err(LlmError::Unavailable(_))));
        server.join().unwrap();
    }

    #[test]
    fn refused_connection_is_unavailable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let client = HttpChatClient::new(config(format!("http://127.0.0.1:{port}/"))).unwrap();
        assert!(matches!(client.complete("x"), Err(LlmError::Unavailable(_))));
    }

    #[test]
    fn api_key_is_never_debug_printed() {
        let text = format!("{:?}", config("http://x".into()));
        assert!(!text.contains("sk-secret"));
        assert!(text.contains("<redacted>"));
    }
}
