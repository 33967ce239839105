//! The create, execute, measure, summarize, improve loop.

mod failure;
pub mod machine;
mod session;

use std::time::Duration;

pub use failure::{tail, FailureEvidence, FailureKind, EVIDENCE_CAP_BYTES};
pub use machine::{
    step, stop_reason, AgentState, Event, FailureSite, IterationRecord, Limits, SessionState, StepError,
    TerminationReason, CONVERGENCE_WINDOW, DEFAULT_MAX_ITERATIONS, DEFAULT_MAX_REALIGN,
};
pub use session::{Clock, ManualClock, Session, SessionError, SessionOutcome, SystemClock, Workspace};

use crate::llm::{over_budget, ChatMessage};
use crate::runtime::GeneratorScript;

/// The first fenced code block of a reply becomes the script.
pub fn extract_script(reply: &ChatMessage, version: u32) -> Result<GeneratorScript, FailureEvidence> {
    first_fenced_block(&reply.content).map(|src| GeneratorScript::new(src, version)).map_err(FailureEvidence::parse)
}

fn first_fenced_block(text: &str) -> Result<String, &'static str> {
    let mut lines = text.lines();
    let mut open_indent = None;
    for line in lines.by_ref() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            open_indent = Some(line.len() - trimmed.len());
            break;
        }
    }
    let Some(indent) = open_indent else {
        return Err("The response does not contain a code block wrapped in triple backticks.");
    };
    let mut body = Vec::new();
    for line in lines {
        let t = line.trim();
        if t.len() >= 3 && t.bytes().all(|b| b == b'`') {
            let src = body.join("\n");
            if src.trim().is_empty() {
                return Err("The code block in the response is empty.");
            }
            return Ok(src + "\n");
        }
        // Strip the fence's own indentation so indented blocks stay valid Python.
        let strip = line.len() - line.trim_start().len();
        body.push(&line[strip.min(indent)..]);
    }
    Err("The code block in the response is not closed with triple backticks.")
}

/// Soft bounds, consulted only at Summarize.
pub fn should_continue(s: &SessionState, elapsed: Duration, wall_limit: Duration) -> bool {
    elapsed < wall_limit && !over_budget(&s.ledger)
}
