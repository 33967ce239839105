//! Prompt templates and deterministic slot filling.
//!
//! The system, user, example-script and summary templates are kept verbatim
//! in `templates/`. Placeholders are `{name}` with a lowercase identifier and
//! are substituted in a single pass, so slot values may contain braces.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::agent::{FailureEvidence, FailureKind};

const SYSTEM: &str = include_str!("../templates/system.txt");
const USER: &str = include_str!("../templates/user.txt");
const EXAMPLE_SCRIPT: &str = include_str!("../templates/example_script.txt");
const SUMMARY: &str = include_str!("../templates/summary.txt");
const IMPROVE: &str = include_str!("../templates/improve.txt");
const REALIGN_PARSE: &str = include_str!("../templates/realign_parse.txt");
const REALIGN_EXEC: &str = include_str!("../templates/realign_exec.txt");
const REALIGN_EMPTY: &str = include_str!("../templates/realign_empty.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    SystemPrompt,
    UserPrompt,
    ExampleScriptPrompt,
    SummaryPrompt,
    /// Request for the next generator, sent after the summary exchange.
    ImprovePrompt,
    RealignPrompt(FailureKind),
}

impl PromptKind {
    pub fn template(self) -> &'static str {
        match self {
            PromptKind::SystemPrompt => SYSTEM,
            PromptKind::UserPrompt => USER,
            PromptKind::ExampleScriptPrompt => EXAMPLE_SCRIPT,
            PromptKind::SummaryPrompt => SUMMARY,
            PromptKind::ImprovePrompt => IMPROVE,
            PromptKind::RealignPrompt(FailureKind::ParseFailure) => REALIGN_PARSE,
            PromptKind::RealignPrompt(FailureKind::ExecFailure) => REALIGN_EXEC,
            PromptKind::RealignPrompt(FailureKind::EmptyOutput) => REALIGN_EMPTY,
        }
    }

    /// Slot names the template requires, in order of first appearance.
    pub fn slots(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for seg in parse(self.template()) {
            if let Segment::Slot(name) = seg {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptKind::RealignPrompt(k) => write!(f, "RealignPrompt({k})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("{kind} requires slot `{slot}`")]
    MissingSlot { kind: String, slot: String },
    #[error("{kind} has no slot named `{slot}`")]
    UnknownSlot { kind: String, slot: String },
}

enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn parse(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let bytes = template.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let name_len = bytes[i + 1..]
                .iter()
                .take_while(|c| c.is_ascii_lowercase() || **c == b'_')
                .count();
            let close = i + 1 + name_len;
            if name_len > 0 && bytes.get(close) == Some(&b'}') {
                if start < i {
                    out.push(Segment::Text(&template[start..i]));
                }
                out.push(Segment::Slot(&template[i + 1..close]));
                i = close + 1;
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < template.len() {
        out.push(Segment::Text(&template[start..]));
    }
    out
}

pub fn render<K, V>(kind: PromptKind, slots: impl IntoIterator<Item = (K, V)>) -> Result<String, PromptError>
where
    K: Into<String>,
    V: Into<String>,
{
    let slots: BTreeMap<String, String> = slots.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
    let required = kind.slots();
    if let Some(extra) = slots.keys().find(|k| !required.contains(&k.as_str())) {
        return Err(PromptError::UnknownSlot { kind: kind.to_string(), slot: extra.clone() });
    }
    let mut out = String::with_capacity(kind.template().len());
    for seg in parse(kind.template()) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot(name) => match slots.get(name) {
                Some(v) => out.push_str(v),
                None => {
                    return Err(PromptError::MissingSlot { kind: kind.to_string(), slot: name.to_owned() })
                }
            },
        }
    }
    Ok(out)
}

/// Slot-free template text.
pub fn render_static(kind: PromptKind) -> String {
    render(kind, std::iter::empty::<(String, String)>())
        .unwrap_or_else(|e| panic!("{kind} is not slot-free: {e}"))
}

fn fenced(text: &str) -> String {
    let mut s = String::from("```\n");
    s.push_str(text);
    if !text.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("```");
    s
}

/// Realignment instruction carrying the captured failure evidence.
pub fn render_realign(failure: &FailureEvidence) -> String {
    let kind = PromptKind::RealignPrompt(failure.kind);
    let mut evidence = String::new();
    let stderr = if failure.stderr.trim().is_empty() { "(no output captured)" } else { &failure.stderr };
    match failure.kind {
        FailureKind::ParseFailure => evidence.push_str(stderr),
        FailureKind::ExecFailure | FailureKind::EmptyOutput => {
            evidence.push_str("## Standard Error:\n");
            evidence.push_str(&fenced(stderr));
            if !failure.stack_trace.is_empty() && !failure.stderr.contains(&failure.stack_trace) {
                evidence.push_str("\n## Stack Trace:\n");
                evidence.push_str(&fenced(&failure.stack_trace));
            }
        }
    }
    let slots: Vec<(&str, String)> = match failure.kind {
        FailureKind::ExecFailure => {
            let status = if failure.timed_out {
                "timed out".to_owned()
            } else {
                match failure.exit_code {
                    Some(code) => format!("exit code {code}"),
                    None => "terminated by a signal".to_owned(),
                }
            };
            vec![("exit_status", status), ("evidence", evidence)]
        }
        _ => vec![("evidence", evidence)],
    };
    render(kind, slots).expect("realign templates take exactly these slots")
}
