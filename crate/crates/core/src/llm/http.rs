//! Chat-completions-style HTTP backend.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, BackendReply, ChatBackend, ChatMessage, CompletionParams, ContentPart, Usage};
use crate::domain::CallTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpChatConfig {
    /// Full URL of the chat completions route.
    pub endpoint: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Global request budget; `None` disables limiting.
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
}

impl HttpChatConfig {
    /// Reads `MODEL_ENDPOINT` and `MODEL_API_KEY`.
    pub fn from_env() -> Option<HttpChatConfig> {
        let endpoint = std::env::var("MODEL_ENDPOINT").ok().filter(|s| !s.is_empty())?;
        Some(HttpChatConfig {
            endpoint,
            api_key: std::env::var("MODEL_API_KEY").ok().filter(|s| !s.is_empty()),
            requests_per_minute: None,
        })
    }
}

pub struct HttpChatBackend {
    config: HttpChatConfig,
    client: reqwest::blocking::Client,
    next_slot: Mutex<Option<Instant>>,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Result<HttpChatBackend> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(HttpChatBackend {
            config,
            client,
            next_slot: Mutex::new(None),
        })
    }

    fn wait_for_slot(&self) {
        let Some(rpm) = self.config.requests_per_minute.filter(|r| *r > 0) else {
            return;
        };
        let interval = Duration::from_secs(60) / rpm;
        let wait = {
            let mut next = self.next_slot.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Request body in the chat-completions wire format.
pub fn request_body(messages: &[ChatMessage], params: &CompletionParams) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => json!({"type": "text", "text": t}),
                    ContentPart::Image(img) => {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
                        json!({"type": "image_url", "image_url": {"url": format!("data:{};base64,{}", img.media_type, b64)}})
                    }
                })
                .collect();
            json!({"role": m.role, "content": content})
        })
        .collect();
    json!({
        "model": params.model_id,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "messages": messages,
    })
}

/// Extracts the first choice's text and the reported usage.
pub fn parse_response(body: &Value) -> std::result::Result<(String, Option<Usage>), String> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| "response has no choices[0].message.content".to_string())?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => return Err(format!("unexpected content type: {other}")),
    };
    let usage = body.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((text, usage))
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.config.endpoint
    }

    fn send(&self, messages: &[ChatMessage], params: &CompletionParams, _tag: &CallTag) -> Result<BackendReply, BackendError> {
        self.wait_for_slot();
        let started = Instant::now();
        let mut req = self
            .client
            .post(&self.config.endpoint)
            .timeout(params.timeout)
            .json(&request_body(messages, params));
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if status.is_client_error() {
            let detail = resp.text().unwrap_or_default();
            return Err(BackendError::BadRequest(format!("HTTP {status}: {detail}")));
        }
        let body: Value = resp.json().map_err(|e| BackendError::Transient(e.to_string()))?;
        let (text, usage) = parse_response(&body).map_err(BackendError::BadRequest)?;
        Ok(BackendReply {
            text,
            usage,
            latency: Some(started.elapsed()),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::domain::ImageData;
    use crate::llm::Role;

    #[test]
    fn body_shape() {
        let msg = ChatMessage::user_with_image(
            "describe",
            ImageData {
                media_type: "image/png".into(),
                bytes: Arc::from(vec![1u8, 2, 3]),
            },
        );
        let body = request_body(&[msg], &CompletionParams::default());
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0], json!({"type": "text", "text": "describe"}));
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
        let _ = Role::System;
    }

    #[test]
    fn parses_string_and_array_content() {
        let body = json!({"choices": [{"message": {"content": "hi"}}], "usage": {"prompt_tokens": 5, "completion_tokens": 1}});
        let (text, usage) = parse_response(&body).unwrap();
        assert_eq!(text, "hi");
        assert_eq!(usage.unwrap().prompt_tokens, 5);
        let body = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(parse_response(&body).unwrap(), ("ab".to_string(), None));
        assert!(parse_response(&json!({"choices": []})).is_err());
    }
}
