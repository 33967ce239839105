//! Deterministic provider that replays a transcript of assistant replies.
//!
//! Two file formats are accepted:
//!
//! * JSON: `{"replies": [...]}` or a bare array. Each entry is either a string,
//!   `{"content": "...", "usage": {"prompt_tokens": n, "completion_tokens": m}}`,
//!   or a fault `{"error": "transport" | "refusal" | "overflow"}`.
//! * Plain text: replies separated by lines consisting of `=== reply ===`.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatProvider, GatewayError, ProviderProfile, ProviderReply, Usage};

pub const REPLY_SEPARATOR: &str = "=== reply ===";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fault {
    Transport,
    Refusal,
    Overflow,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReplayEntry {
    Text(String),
    Reply {
        content: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        usage: Option<Usage>,
    },
    Fault {
        error: Fault,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplayFile {
    Object { replies: Vec<ReplayEntry> },
    List(Vec<ReplayEntry>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayTranscript {
    pub entries: Vec<ReplayEntry>,
}

impl ReplayTranscript {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') || trimmed.starts_with('[') {
            let file: ReplayFile = serde_json::from_str(text)
                .map_err(|e| GatewayError::Config(format!("replay transcript: {e}")))?;
            let entries = match file {
                ReplayFile::Object { replies } => replies,
                ReplayFile::List(l) => l,
            };
            return Ok(Self { entries });
        }
        let mut chunks = Vec::new();
        let mut current = String::new();
        for line in text.split_inclusive('\n') {
            if line.trim_end_matches(['\n', '\r']) == REPLY_SEPARATOR {
                chunks.push(std::mem::take(&mut current));
            } else {
                current.push_str(line);
            }
        }
        chunks.push(current);
        if chunks.first().is_some_and(|c| c.trim().is_empty()) {
            chunks.remove(0);
        }
        let entries = chunks
            .into_iter()
            .map(|c| ReplayEntry::Text(c.trim_end_matches('\n').to_owned()))
            .collect();
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Pops one transcript entry per call and records every request it receives.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<ReplayEntry>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedProvider {
    pub fn new(transcript: ReplayTranscript) -> Self {
        Self { queue: Mutex::new(transcript.entries.into()), requests: Mutex::default() }
    }

    pub fn from_replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(ReplayTranscript { entries: replies.into_iter().map(|s| ReplayEntry::Text(s.into())).collect() })
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("poisoned").len()
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, history: &[ChatMessage], _: &ProviderProfile, _: Duration) -> Result<ProviderReply, GatewayError> {
        self.requests.lock().expect("poisoned").push(history.to_vec());
        match self.queue.lock().expect("poisoned").pop_front() {
            None => Err(GatewayError::ReplayExhausted),
            Some(ReplayEntry::Text(content)) => Ok(ProviderReply { content, usage: None }),
            Some(ReplayEntry::Reply { content, usage }) => Ok(ProviderReply { content, usage }),
            Some(ReplayEntry::Fault { error: Fault::Transport }) => {
                Err(GatewayError::Transport("scripted transport fault".to_owned()))
            }
            Some(ReplayEntry::Fault { error: Fault::Refusal }) => {
                Err(GatewayError::ProviderRefusal("scripted refusal".to_owned()))
            }
            Some(ReplayEntry::Fault { error: Fault::Overflow }) => {
                Err(GatewayError::ContextOverflow { estimated: 0, window: 0 })
            }
        }
    }
}
