//! Model interaction: a common [`Agent`] interface over scripted reference
//! agents and an HTTP chat-completions client.

mod http;
mod scripted;

pub use http::{
    ChatClient, ClientConfig, HttpReply, InflightGate, TokenBucket, Transport, TransportError, UreqTransport,
};
pub use scripted::{ScriptedAgent, ScriptedAgentKind};

use crate::prompt::MessageList;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What the harness reveals to scripted agents about the current query.
///
/// HTTP clients ignore it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleView {
    /// Rendered expected answer at the queried step (`Answer: ...`).
    pub expected_answer: String,
    /// Rendered expected answer at the step before.
    pub previous_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    pub retries: u32,
}

/// Provenance recorded alongside transcripts. Never contains secrets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<serde_json::Map<String, serde_json::Value>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {body}")]
    MalformedResponse { body: String },
    #[error("no answer block in prompt to copy")]
    NoPreviousAnswer,
    #[error("no question in prompt")]
    NoQuestion,
}

impl ClientError {
    /// Errors that should stop a whole run rather than one trial.
    pub fn is_fatal(&self) -> bool {
        matches!(self, ClientError::Auth { .. })
    }
}

pub trait Agent: Send + Sync {
    fn complete(&self, messages: &MessageList, view: &OracleView) -> Result<Completion, ClientError>;

    fn info(&self) -> AgentInfo;
}

impl<A: Agent + ?Sized> Agent for Box<A> {
    fn complete(&self, messages: &MessageList, view: &OracleView) -> Result<Completion, ClientError> {
        (**self).complete(messages, view)
    }

    fn info(&self) -> AgentInfo {
        (**self).info()
    }
}

impl<A: Agent + ?Sized> Agent for std::sync::Arc<A> {
    fn complete(&self, messages: &MessageList, view: &OracleView) -> Result<Completion, ClientError> {
        (**self).complete(messages, view)
    }

    fn info(&self) -> AgentInfo {
        (**self).info()
    }
}
