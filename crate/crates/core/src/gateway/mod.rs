//! Prompt rendering, judge-response parsing and the chat-completion client.
//!
//! This is the only module that performs network I/O.

mod client;
mod mock;
pub mod noise;
mod parse;
mod prompt;

use thiserror::Error;

pub use client::{
    complete_with_retry, extract_content, ChatMessage, ChatRequest, ChatTransport, HttpTransport,
    LlmClient, LlmClientConfig, TransportError, DEFAULT_API_KEY_ENV, MAX_RETRIES_CAP,
};
pub use mock::MockTransport;
pub use parse::{parse_generated_pairs, parse_rating};
pub use prompt::{render_prompt, vars, PromptTemplate, TemplateName};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("template `{template}` needs placeholder `{name}`")]
    MissingPlaceholder { template: String, name: String },
    #[error("no JSON object found in rating response")]
    NoJsonFound,
    #[error("rating response lacks key `{0}`")]
    MissingKey(String),
    #[error("rating `{key}` is not an integer: {value}")]
    InvalidScore { key: String, value: String },
    #[error("rating `{key}` = {value} outside 1..=10")]
    ScoreOutOfRange { key: String, value: i64 },
    #[error("no complete Instruction/Output pair found")]
    ZeroPairsFound,
    #[error("request failed after {attempts} attempt(s): {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("request rejected: {0}")]
    Request(String),
    #[error("gateway config: {0}")]
    Config(String),
}
