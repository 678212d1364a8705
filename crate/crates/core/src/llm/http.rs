//! Live chat-completion adapter over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, Completion, LlmError, TokenUsage};
use crate::types::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFlavor {
    /// Messages API with `cache_control` annotations.
    Anthropic,
    /// OpenAI-compatible `/chat/completions` (vLLM, SGLang, hosted APIs).
    #[serde(rename = "openai")]
    OpenAi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub flavor: ApiFlavor,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the credential.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "HttpConfig::default_timeout")]
    pub timeout_s: u64,
}

impl HttpConfig {
    fn default_timeout() -> u64 {
        600
    }

    fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        match self.flavor {
            ApiFlavor::Anthropic => format!("{base}/v1/messages"),
            ApiFlavor::OpenAi => format!("{base}/chat/completions"),
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                LlmError::InvalidRequest(format!("environment variable `{var}` is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// Wire body for a request.
pub(crate) fn request_body(config: &HttpConfig, request: &ChatRequest) -> Value {
    match config.flavor {
        ApiFlavor::Anthropic => {
            let marker = request.cache_prefix_marker.unwrap_or(0);
            let mut system = Vec::new();
            let mut messages = Vec::new();
            for (i, msg) in request.messages.iter().enumerate() {
                let mut block = json!({"type": "text", "text": msg.content});
                if marker > 0 && i + 1 == marker {
                    block["cache_control"] = json!({"type": "ephemeral"});
                }
                if msg.role == Role::System {
                    system.push(block);
                } else {
                    messages.push(json!({"role": role_name(msg.role), "content": [block]}));
                }
            }
            let mut body = json!({
                "model": config.model,
                "max_tokens": request.max_output_tokens,
                "temperature": request.temperature,
                "messages": messages,
            });
            if !system.is_empty() {
                body["system"] = Value::Array(system);
            }
            body
        }
        ApiFlavor::OpenAi => {
            let messages: Vec<Value> = request
                .messages
                .iter()
                .map(|m| json!({"role": role_name(m.role), "content": m.content}))
                .collect();
            json!({
                "model": config.model,
                "max_tokens": request.max_output_tokens,
                "temperature": request.temperature,
                "messages": messages,
            })
        }
    }
}

fn field(v: &Value, path: &[&str]) -> u64 {
    path.iter()
        .try_fold(v, |cur, key| cur.get(key))
        .and_then(Value::as_u64)
        .unwrap_or(0)
}

/// Extracts assistant text and four-class usage from a response body.
pub(crate) fn parse_response(flavor: ApiFlavor, body: &Value) -> Result<Completion, LlmError> {
    match flavor {
        ApiFlavor::Anthropic => {
            let blocks = body
                .get("content")
                .and_then(Value::as_array)
                .ok_or_else(|| LlmError::MalformedResponse("missing `content`".into()))?;
            let text: String = blocks
                .iter()
                .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
                .filter_map(|b| b.get("text").and_then(Value::as_str))
                .collect();
            let usage = body.get("usage").cloned().unwrap_or(Value::Null);
            Ok(Completion {
                text,
                usage: TokenUsage {
                    input_tokens: field(&usage, &["input_tokens"]),
                    output_tokens: field(&usage, &["output_tokens"]),
                    cache_read_tokens: field(&usage, &["cache_read_input_tokens"]),
                    cache_write_tokens: field(&usage, &["cache_creation_input_tokens"]),
                },
            })
        }
        ApiFlavor::OpenAi => {
            let text = body
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?
                .to_string();
            let usage = body.get("usage").cloned().unwrap_or(Value::Null);
            let cached = field(&usage, &["prompt_tokens_details", "cached_tokens"]);
            let prompt = field(&usage, &["prompt_tokens"]);
            Ok(Completion {
                text,
                usage: TokenUsage {
                    input_tokens: prompt.saturating_sub(cached),
                    output_tokens: field(&usage, &["completion_tokens"]),
                    cache_read_tokens: cached,
                    cache_write_tokens: 0,
                },
            })
        }
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let body = request_body(&self.config, request);
        let mut call = self.agent.post(self.config.endpoint());
        call = call.header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            call = match self.config.flavor {
                ApiFlavor::Anthropic => call
                    .header("x-api-key", key)
                    .header("anthropic-version", "2023-06-01"),
                ApiFlavor::OpenAi => call.header("authorization", &format!("Bearer {key}")),
            };
        } else if self.config.flavor == ApiFlavor::Anthropic {
            call = call.header("anthropic-version", "2023-06-01");
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(LlmError::Transport(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(LlmError::Rejected { status, body: text });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        parse_response(self.config.flavor, &value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn cfg(flavor: ApiFlavor, base_url: String) -> HttpConfig {
        HttpConfig {
            flavor,
            base_url,
            model: "m".into(),
            api_key_env: None,
            timeout_s: 10,
        }
    }

    fn request() -> ChatRequest {
        ChatRequest::new(
            "c",
            vec![
                ChatMessage::new(Role::System, "sys"),
                ChatMessage::new(Role::User, "issue"),
                ChatMessage::new(Role::Assistant, "draft"),
                ChatMessage::new(Role::User, "feedback"),
            ],
            0.5,
        )
        .with_cache_prefix(2)
    }

    #[test]
    fn anthropic_body_marks_cache_boundary() {
        let body = request_body(&cfg(ApiFlavor::Anthropic, "http://x".into()), &request());
        assert_eq!(body["system"][0]["text"], "sys");
        let msgs = body["messages"].as_array().unwrap();
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs[0]["content"][0]["cache_control"]["type"], "ephemeral");
        assert!(msgs[1]["content"][0].get("cache_control").is_none());
        assert_eq!(body["temperature"], 0.5);
    }

    #[test]
    fn openai_usage_splits_cached_prompt() {
        let body = json!({
            "choices": [{"message": {"content": "hi"}}],
            "usage": {"prompt_tokens": 100, "completion_tokens": 5,
                      "prompt_tokens_details": {"cached_tokens": 60}}
        });
        let c = parse_response(ApiFlavor::OpenAi, &body).unwrap();
        assert_eq!(c.text, "hi");
        assert_eq!(c.usage.input_tokens, 40);
        assert_eq!(c.usage.cache_read_tokens, 60);
        assert_eq!(c.usage.output_tokens, 5);
    }

    fn serve_once(status: &'static str, body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let reply = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        });
        format!("http://{addr}")
    }

    #[test]
    fn round_trip_against_local_server() {
        let url = serve_once(
            "200 OK",
            r#"{"content":[{"type":"text","text":"done"}],"usage":{"input_tokens":3,"output_tokens":1,"cache_read_input_tokens":9,"cache_creation_input_tokens":2}}"#,
        );
        let backend = HttpBackend::new(cfg(ApiFlavor::Anthropic, url)).unwrap();
        let out = backend.send(&request()).unwrap();
        assert_eq!(out.text, "done");
        assert_eq!(out.usage.cache_read_tokens, 9);
        assert_eq!(out.usage.cache_write_tokens, 2);
    }

    #[test]
    fn server_errors_are_transient() {
        let url = serve_once("503 Service Unavailable", "{}");
        let backend = HttpBackend::new(cfg(ApiFlavor::OpenAi, url)).unwrap();
        assert!(backend.send(&request()).unwrap_err().is_transient());
    }

    #[test]
    fn client_errors_are_fatal() {
        let url = serve_once("400 Bad Request", "{\"error\":\"bad\"}");
        let backend = HttpBackend::new(cfg(ApiFlavor::OpenAi, url)).unwrap();
        assert!(matches!(
            backend.send(&request()),
            Err(LlmError::Rejected { status: 400, .. })
        ));
    }
}
