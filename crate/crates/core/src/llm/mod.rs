//! Provider-agnostic multimodal chat completion with retry and token accounting.

mod http;
mod mock;

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::http::{HttpChatBackend, HttpChatConfig};
pub use self::mock::{LoggedCall, MockBackend, MockResponse, MockScript, PromptMatcher, ScriptRule};
use crate::domain::{CallTag, ImageData, TraceEntry};
use crate::embedding::duration_ms;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Image(ImageData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<ContentPart>) -> Result<ChatMessage> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("chat message without content parts".into()));
        }
        Ok(ChatMessage { role, parts })
    }

    pub fn user_text(text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn assistant_text(text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role: Role::Assistant,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    /// User message with the prompt text followed by an image.
    pub fn user_with_image(text: impl Into<String>, image: ImageData) -> ChatMessage {
        ChatMessage {
            role: Role::User,
            parts: vec![ContentPart::Text(text.into()), ContentPart::Image(image)],
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageData> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Image(img) => Some(img),
            ContentPart::Text(_) => None,
        })
    }
}

/// Text of a conversation as one string: parts joined by `\n`, messages by a
/// blank line. Image parts contribute nothing.
pub fn rendered_prompt(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| {
            m.parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::Text(t) => Some(t.as_str()),
                    ContentPart::Image(_) => None,
                })
                .collect::<Vec<_>>()
                .join("\n")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Deterministic token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout", with = "duration_ms")]
    pub timeout: Duration,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// First backoff delay; doubles per attempt, plus up to the same amount of jitter.
    #[serde(default = "default_backoff", with = "duration_ms")]
    pub backoff_base: Duration,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout() -> Duration {
    Duration::from_secs(60)
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> Duration {
    Duration::from_millis(500)
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            model_id: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            timeout: default_timeout(),
            retries: default_retries(),
            backoff_base: default_backoff(),
        }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
    pub attempts: u32,
}

impl Completion {
    pub fn trace_entry(&self, tag: &CallTag) -> TraceEntry {
        TraceEntry {
            stage: tag.stage,
            agent: tag.agent.clone(),
            prompt_tokens: self.usage.prompt_tokens,
            completion_tokens: self.usage.completion_tokens,
            wall_time_us: self.latency.as_micros() as u64,
            attempts: self.attempts,
            note: None,
        }
    }
}

/// What a backend returns for one attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    /// Reported usage; estimated from text when absent.
    pub usage: Option<Usage>,
    /// Reported latency; measured wall time when absent.
    pub latency: Option<Duration>,
}

#[derive(Debug)]
pub enum BackendError {
    /// Timeout, 5xx, rate limit: worth retrying.
    Transient(String),
    /// Non-retryable 4xx.
    BadRequest(String),
    Fatal(Error),
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn send(&self, messages: &[ChatMessage], params: &CompletionParams, tag: &CallTag) -> Result<BackendReply, BackendError>;
}

/// Runs one chat completion with retries on transient failures.
/// An empty reply is an [`Error::EmptyCompletion`].
pub fn complete(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &CompletionParams,
    tag: &CallTag,
) -> Result<Completion> {
    let completion = complete_allow_empty(backend, messages, params, tag)?;
    if completion.text.trim().is_empty() {
        return Err(Error::EmptyCompletion);
    }
    Ok(completion)
}

/// Like [`complete`], but hands back empty replies so callers can account for them.
pub fn complete_allow_empty(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &CompletionParams,
    tag: &CallTag,
) -> Result<Completion> {
    if messages.is_empty() {
        return Err(Error::InvalidInput("no messages".into()));
    }
    params.validate()?;
    let started = Instant::now();
    let mut attempts = 0u32;
    let reply = loop {
        attempts += 1;
        match backend.send(messages, params, tag) {
            Ok(reply) => break reply,
            Err(BackendError::BadRequest(msg)) => return Err(Error::BadRequest(msg)),
            Err(BackendError::Fatal(e)) => return Err(e),
            Err(BackendError::Transient(msg)) => {
                if attempts > params.retries {
                    return Err(Error::ProviderUnavailable { attempts, message: msg });
                }
                log::debug!("{tag}: transient failure on attempt {attempts}: {msg}");
                std::thread::sleep(backoff_delay(params.backoff_base, attempts));
            }
        }
    };
    let usage = reply.usage.unwrap_or_else(|| Usage {
        prompt_tokens: estimate_tokens(&rendered_prompt(messages)),
        completion_tokens: estimate_tokens(&reply.text),
    });
    Ok(Completion {
        text: reply.text,
        usage,
        latency: reply.latency.unwrap_or_else(|| started.elapsed()),
        attempts,
    })
}

fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    if base.is_zero() {
        return Duration::ZERO;
    }
    let exp = base.saturating_mul(1 << (attempt - 1).min(10));
    let jitter = rand::thread_rng().gen_range(0..=base.as_millis() as u64);
    exp + Duration::from_millis(jitter)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;
    use crate::domain::Stage;

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        bad_request: bool,
    }

    impl ChatBackend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }

        fn send(&self, _: &[ChatMessage], _: &CompletionParams, _: &CallTag) -> Result<BackendReply, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.bad_request {
                return Err(BackendError::BadRequest("400".into()));
            }
            if n < self.failures {
                return Err(BackendError::Transient("503".into()));
            }
            Ok(BackendReply {
                text: "ok".into(),
                usage: None,
                latency: None,
            })
        }
    }

    fn params(retries: u32) -> CompletionParams {
        CompletionParams {
            retries,
            backoff_base: Duration::ZERO,
            ..Default::default()
        }
    }

    fn tag() -> CallTag {
        CallTag::new(Stage::Ma, "text")
    }

    #[test]
    fn retries_until_success() {
        let b = Flaky {
            failures: 2,
            calls: AtomicU32::new(0),
            bad_request: false,
        };
        let c = complete(&b, &[ChatMessage::user_text("hi")], &params(3), &tag()).unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(c.attempts, 3);
        assert_eq!(c.trace_entry(&tag()).attempts, 3);
    }

    #[test]
    fn exhausts_retries() {
        let b = Flaky {
            failures: u32::MAX,
            calls: AtomicU32::new(0),
            bad_request: false,
        };
        let err = complete(&b, &[ChatMessage::user_text("hi")], &params(0), &tag()).unwrap_err();
        assert!(matches!(err, Error::ProviderUnavailable { attempts: 1, .. }));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn never_retries_bad_request() {
        let b = Flaky {
            failures: 0,
            calls: AtomicU32::new(0),
            bad_request: true,
        };
        let err = complete(&b, &[ChatMessage::user_text("hi")], &params(5), &tag()).unwrap_err();
        assert!(matches!(err, Error::BadRequest(_)));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("ééééé"), 2);
    }

    #[test]
    fn message_requires_parts() {
        assert!(ChatMessage::new(Role::User, vec![]).is_err());
    }
}
