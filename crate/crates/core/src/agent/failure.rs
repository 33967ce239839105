use std::fmt;

use serde::{Deserialize, Serialize};

/// Evidence text (stderr, stack trace) keeps at most this many trailing bytes.
pub const EVIDENCE_CAP_BYTES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureKind {
    /// The reply held no usable script.
    ParseFailure,
    /// The script crashed, exited non-zero or timed out.
    ExecFailure,
    /// The script ran cleanly but wrote no test case.
    EmptyOutput,
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureKind::ParseFailure => "ParseFailure",
            FailureKind::ExecFailure => "ExecFailure",
            FailureKind::EmptyOutput => "EmptyOutput",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvidence {
    pub kind: FailureKind,
    pub stderr: String,
    pub stack_trace: String,
    pub exit_code: Option<i32>,
    #[serde(default)]
    pub timed_out: bool,
}

impl FailureEvidence {
    pub fn new(
        kind: FailureKind,
        stderr: impl AsRef<str>,
        stack_trace: impl AsRef<str>,
        exit_code: Option<i32>,
    ) -> Self {
        Self {
            kind,
            stderr: tail(stderr.as_ref(), EVIDENCE_CAP_BYTES),
            stack_trace: tail(stack_trace.as_ref(), EVIDENCE_CAP_BYTES),
            exit_code,
            timed_out: false,
        }
    }

    pub fn parse(message: impl AsRef<str>) -> Self {
        Self::new(FailureKind::ParseFailure, message, "", None)
    }
}

/// Last `cap` bytes of `s`, moved forward to a character boundary.
pub fn tail(s: &str, cap: usize) -> String {
    if s.len() <= cap {
        return s.to_owned();
    }
    let mut start = s.len() - cap;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_owned()
}
