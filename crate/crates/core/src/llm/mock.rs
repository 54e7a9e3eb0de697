//! Scripted, deterministic chat backend.
//!
//! Calls are matched against rules in registration order; the first rule
//! that matches serves the next response of its sequence (the last response
//! repeats once the sequence is exhausted). Every served call is logged with
//! its fully rendered prompt.
//!
//! Sequence cursors are shared across all callers, so scripts used with
//! parallel batches should rely on content matchers rather than sequences.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{rendered_prompt, BackendError, BackendReply, ChatBackend, ChatMessage, CompletionParams};
use crate::domain::CallTag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMatcher {
    /// Hex SHA-256 of the rendered prompt.
    PromptSha256(String),
    /// Every listed substring occurs in the rendered prompt.
    Contains(Vec<String>),
}

impl PromptMatcher {
    pub fn substring(s: impl Into<String>) -> PromptMatcher {
        PromptMatcher::Contains(vec![s.into()])
    }

    pub fn all_of<I, S>(parts: I) -> PromptMatcher
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        PromptMatcher::Contains(parts.into_iter().map(Into::into).collect())
    }

    pub fn exact(prompt: &str) -> PromptMatcher {
        PromptMatcher::PromptSha256(prompt_sha256(prompt))
    }

    fn matches(&self, prompt: &str, hash: &str) -> bool {
        match self {
            PromptMatcher::PromptSha256(h) => h.eq_ignore_ascii_case(hash),
            PromptMatcher::Contains(parts) => parts.iter().all(|p| prompt.contains(p.as_str())),
        }
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Text(String),
    Error { error: MockFailure },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Transient,
    BadRequest,
}

impl MockResponse {
    pub fn text(s: impl Into<String>) -> MockResponse {
        MockResponse::Text(s.into())
    }

    pub fn transient() -> MockResponse {
        MockResponse::Error {
            error: MockFailure::Transient,
        }
    }

    pub fn bad_request() -> MockResponse {
        MockResponse::Error {
            error: MockFailure::BadRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub matcher: PromptMatcher,
    pub responses: Vec<MockResponse>,
}

#[derive(Deserialize, Serialize)]
struct RawRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<MockResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    responses: Vec<MockResponse>,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

/// JSON-loadable mock script:
///
/// ```json
/// {"rules": [
///   {"contains": "Text Analysis Agent", "response": "ANALYSIS-T"},
///   {"contains": ["Adjudicator Agent", "\"post 1\""], "responses": [{"error": "transient"}, "Stance: Favor\nJustification: x"]},
///   {"prompt_sha256": "9f86d0...", "response": "exact"}
/// ]}
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
}

#[derive(Deserialize, Serialize)]
struct RawScript {
    rules: Vec<RawRule>,
}

impl MockScript {
    pub fn from_json(json: &str) -> Result<MockScript> {
        let raw: RawScript = serde_json::from_str(json)?;
        let mut rules = Vec::with_capacity(raw.rules.len());
        for (i, r) in raw.rules.into_iter().enumerate() {
            let matcher = match (r.contains, r.prompt_sha256) {
                (Some(OneOrMany::One(s)), None) => PromptMatcher::Contains(vec![s]),
                (Some(OneOrMany::Many(v)), None) => PromptMatcher::Contains(v),
                (None, Some(h)) => PromptMatcher::PromptSha256(h),
                _ => {
                    return Err(Error::Schema {
                        row: i + 1,
                        message: "rule needs exactly one of `contains` or `prompt_sha256`".into(),
                    })
                }
            };
            let mut responses = r.responses;
            if let Some(one) = r.response {
                responses.insert(0, one);
            }
            if responses.is_empty() {
                return Err(Error::Schema {
                    row: i + 1,
                    message: "rule has no responses".into(),
                });
            }
            rules.push(ScriptRule { matcher, responses });
        }
        Ok(MockScript { rules })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MockScript> {
        MockScript::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawScript {
            rules: self
                .rules
                .iter()
                .map(|r| {
                    let (contains, prompt_sha256) = match &r.matcher {
                        PromptMatcher::Contains(v) => (Some(OneOrMany::Many(v.clone())), None),
                        PromptMatcher::PromptSha256(h) => (None, Some(h.clone())),
                    };
                    RawRule {
                        contains,
                        prompt_sha256,
                        response: None,
                        responses: r.responses.clone(),
                    }
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }
}

/// One call served by the mock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedCall {
    pub tag: CallTag,
    pub prompt: String,
    pub message_count: usize,
    /// Media types of attached images, in order.
    pub image_media_types: Vec<String>,
}

struct RuleState {
    rule: ScriptRule,
    cursor: usize,
}

pub struct MockBackend {
    id: String,
    rules: Mutex<Vec<RuleState>>,
    log: Mutex<Vec<LoggedCall>>,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new()
    }
}

impl MockBackend {
    pub fn new() -> MockBackend {
        MockBackend {
            id: "mock".into(),
            rules: Mutex::new(Vec::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_script(script: MockScript) -> MockBackend {
        let mock = MockBackend::new();
        for rule in script.rules {
            mock.register_sequence(rule.matcher, rule.responses);
        }
        mock
    }

    /// Appends `response` to the sequence of `matcher`, creating the rule if new.
    pub fn register(&self, matcher: PromptMatcher, response: MockResponse) {
        self.register_sequence(matcher, vec![response]);
    }

    pub fn register_text(&self, matcher: PromptMatcher, response: impl Into<String>) {
        self.register(matcher, MockResponse::Text(response.into()));
    }

    pub fn register_sequence(&self, matcher: PromptMatcher, responses: Vec<MockResponse>) {
        let mut rules = self.rules.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = rules.iter_mut().find(|s| s.rule.matcher == matcher) {
            existing.rule.responses.extend(responses);
        } else {
            rules.push(RuleState {
                rule: ScriptRule { matcher, responses },
                cursor: 0,
            });
        }
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }

    /// Rewinds every sequence to its first response.
    pub fn rewind(&self) {
        for s in self.rules.lock().unwrap_or_else(|e| e.into_inner()).iter_mut() {
            s.cursor = 0;
        }
    }

    fn next_response(&self, prompt: &str) -> Option<MockResponse> {
        let hash = prompt_sha256(prompt);
        let mut rules = self.rules.lock().unwrap_or_else(|e| e.into_inner());
        let state = rules.iter_mut().find(|s| s.rule.matcher.matches(prompt, &hash))?;
        let idx = state.cursor.min(state.rule.responses.len() - 1);
        state.cursor += 1;
        Some(state.rule.responses[idx].clone())
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, messages: &[ChatMessage], _: &CompletionParams, tag: &CallTag) -> Result<BackendReply, BackendError> {
        let prompt = rendered_prompt(messages);
        let Some(response) = self.next_response(&prompt) else {
            let head: String = prompt.chars().take(80).collect();
            return Err(BackendError::Fatal(Error::NoScriptMatch(head)));
        };
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(LoggedCall {
            tag: tag.clone(),
            message_count: messages.len(),
            image_media_types: messages
                .iter()
                .flat_map(|m| m.images().map(|i| i.media_type.clone()))
                .collect(),
            prompt,
        });
        match response {
            MockResponse::Text(text) => Ok(BackendReply {
                text,
                usage: None,
                latency: Some(Duration::ZERO),
            }),
            MockResponse::Error {
                error: MockFailure::Transient,
            } => Err(BackendError::Transient("scripted transient failure".into())),
            MockResponse::Error {
                error: MockFailure::BadRequest,
            } => Err(BackendError::BadRequest("scripted bad request".into())),
        }
    }
}
