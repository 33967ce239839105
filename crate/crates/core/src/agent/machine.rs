//! The session state machine as a pure transition function.
//!
//! [`step`] never performs I/O. The driver in `session` carries out the
//! effects each state calls for (talking to the model, running scripts,
//! executing the target) and feeds the outcome back as an [`Event`].

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::failure::{FailureEvidence, FailureKind};
use crate::coverage::{merge, total_branch_coverage, CoverageReport};
use crate::llm::{over_budget, ChatMessage, CostLedger};
use crate::runtime::{GeneratorScript, ProduceStats};

pub const DEFAULT_MAX_REALIGN: u32 = 3;
pub const DEFAULT_MAX_ITERATIONS: u32 = 50;
/// Consecutive zero-gain iterations that count as convergence.
pub const CONVERGENCE_WINDOW: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentState {
    Init,
    AwaitInitialScript,
    ValidateScript,
    RunGenerator,
    CollectCoverage,
    Summarize,
    AwaitImprovedScript,
    Realign,
    Done,
    Aborted,
}

impl AgentState {
    pub fn is_terminal(self) -> bool {
        matches!(self, AgentState::Done | AgentState::Aborted)
    }
}

impl fmt::Display for AgentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Where a realignment was triggered from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureSite {
    ValidateScript,
    RunGenerator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminationReason {
    WallClock,
    Budget,
    Converged,
    IterationLimit,
    /// The replay transcript ran out of replies.
    ReplayExhausted,
    /// Realignment retries ran out at one failure site.
    RealignExhausted,
    ProviderFailure,
    TargetFailure,
    RuntimeFailure,
    /// The session never started, e.g. the target failed to build.
    Aborted,
}

impl TerminationReason {
    /// Reasons that mean the session used up an allowance rather than failed.
    pub fn is_success(self) -> bool {
        matches!(
            self,
            TerminationReason::WallClock
                | TerminationReason::Budget
                | TerminationReason::Converged
                | TerminationReason::IterationLimit
                | TerminationReason::ReplayExhausted
        )
    }
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_realign: u32,
    pub max_iterations: u32,
    #[serde(with = "crate::runtime::secs")]
    pub wall_limit: Duration,
    /// Stop after [`CONVERGENCE_WINDOW`] iterations without new branches.
    pub stop_on_convergence: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_realign: DEFAULT_MAX_REALIGN,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            wall_limit: Duration::from_secs(30 * 60),
            stop_on_convergence: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub version: u32,
    pub seeds_added: usize,
    pub duplicates: usize,
    pub crashes: usize,
    pub new_branches: usize,
    pub covered_branches: usize,
    pub total_branches: usize,
    pub coverage: f64,
    pub dollars: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionState {
    pub state: AgentState,
    pub iteration: u32,
    pub history: Vec<ChatMessage>,
    pub best_script: Option<GeneratorScript>,
    /// New branches the best script contributed when it ran.
    pub best_gain: usize,
    /// Script currently being validated or run.
    pub current: Option<GeneratorScript>,
    /// Latest model reply awaiting extraction; `None` after a refusal.
    pub pending_reply: Option<String>,
    pub refusal: Option<String>,
    pub failure: Option<(FailureSite, FailureEvidence)>,
    pub last_stats: Option<ProduceStats>,
    pub total_coverage: CoverageReport,
    pub ledger: CostLedger,
    pub retry_counts: BTreeMap<FailureSite, u32>,
    /// Session start, as an offset on the driver's clock.
    #[serde(with = "crate::runtime::secs")]
    pub started_at: Duration,
    pub stalled_iterations: u32,
    pub validated_versions: Vec<u32>,
    pub iterations: Vec<IterationRecord>,
    pub termination: Option<TerminationReason>,
    pub limits: Limits,
}

impl SessionState {
    pub fn new(limits: Limits, ledger: CostLedger, started_at: Duration) -> Self {
        Self {
            state: AgentState::Init,
            iteration: 0,
            history: Vec::new(),
            best_script: None,
            best_gain: 0,
            current: None,
            pending_reply: None,
            refusal: None,
            failure: None,
            last_stats: None,
            total_coverage: CoverageReport::empty(),
            ledger,
            retry_counts: BTreeMap::new(),
            started_at,
            stalled_iterations: 0,
            validated_versions: Vec::new(),
            iterations: Vec::new(),
            termination: None,
            limits,
        }
    }

    pub fn coverage_ratio(&self) -> f64 {
        total_branch_coverage(&self.total_coverage).unwrap_or(0.0)
    }

    /// Version for the next extracted script; versions start at 1.
    pub fn next_version(&self) -> u32 {
        self.iteration + 1
    }

    pub fn retries_left(&self) -> bool {
        match &self.failure {
            Some((site, _)) => self.retry_counts.get(site).copied().unwrap_or(0) < self.limits.max_realign,
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Started,
    Reply(String),
    /// The provider declined to answer; handled like a reply with no script.
    Refused(String),
    ScriptExtracted(GeneratorScript),
    Failed(FailureEvidence),
    SeedsProduced { script: GeneratorScript, stats: ProduceStats },
    CoverageCollected { report: CoverageReport, crashes: usize },
    Continue,
    Stop(TerminationReason),
    RetriesExhausted,
    /// Unrecoverable infrastructure fault.
    Fatal(TerminationReason),
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Started => "Started",
            Event::Reply(_) => "Reply",
            Event::Refused(_) => "Refused",
            Event::ScriptExtracted(_) => "ScriptExtracted",
            Event::Failed(ev) => match ev.kind {
                FailureKind::ParseFailure => "ParseFailure",
                FailureKind::ExecFailure => "ExecFailure",
                FailureKind::EmptyOutput => "EmptyOutput",
            },
            Event::SeedsProduced { .. } => "SeedsProduced",
            Event::CoverageCollected { .. } => "CoverageCollected",
            Event::Continue => "Continue",
            Event::Stop(_) => "Stop",
            Event::RetriesExhausted => "RetriesExhausted",
            Event::Fatal(_) => "Fatal",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("event {event} is not valid in state {state}")]
    IllegalEvent { state: AgentState, event: &'static str },
}

fn finish(mut s: SessionState, reason: TerminationReason) -> SessionState {
    s.state = if s.best_script.is_some() { AgentState::Done } else { AgentState::Aborted };
    s.termination = Some(reason);
    s.current = None;
    s.pending_reply = None;
    s
}

/// Why the session should stop at a Summarize check, if it should.
/// Checked in order: wall clock, budget, iteration limit, convergence.
pub fn stop_reason(s: &SessionState, now: Duration) -> Option<TerminationReason> {
    let elapsed = now.saturating_sub(s.started_at);
    if elapsed >= s.limits.wall_limit {
        Some(TerminationReason::WallClock)
    } else if over_budget(&s.ledger) {
        Some(TerminationReason::Budget)
    } else if s.iteration >= s.limits.max_iterations {
        Some(TerminationReason::IterationLimit)
    } else if s.limits.stop_on_convergence && s.stalled_iterations >= CONVERGENCE_WINDOW {
        Some(TerminationReason::Converged)
    } else {
        None
    }
}

/// Fire exactly one transition.
pub fn step(mut s: SessionState, event: Event) -> Result<SessionState, StepError> {
    use AgentState as A;
    let illegal = |s: &SessionState, e: &Event| StepError::IllegalEvent { state: s.state, event: e.name() };
    if let Event::Fatal(reason) = event {
        if s.state.is_terminal() {
            return Err(illegal(&s, &Event::Fatal(reason)));
        }
        return Ok(finish(s, reason));
    }
    match (s.state, event) {
        (A::Init, Event::Started) => s.state = A::AwaitInitialScript,

        (A::AwaitInitialScript | A::AwaitImprovedScript, Event::Reply(text)) => {
            s.pending_reply = Some(text);
            s.refusal = None;
            s.state = A::ValidateScript;
        }
        (A::AwaitInitialScript | A::AwaitImprovedScript, Event::Refused(why)) => {
            s.pending_reply = None;
            s.refusal = Some(why);
            s.state = A::ValidateScript;
        }

        (A::ValidateScript, Event::ScriptExtracted(script)) => {
            s.retry_counts.remove(&FailureSite::ValidateScript);
            s.pending_reply = None;
            s.current = Some(script);
            s.state = A::RunGenerator;
        }
        (A::ValidateScript, Event::Failed(ev)) if ev.kind == FailureKind::ParseFailure => {
            s.pending_reply = None;
            s.failure = Some((FailureSite::ValidateScript, ev));
            s.state = A::Realign;
        }

        (A::RunGenerator, Event::SeedsProduced { script, stats }) => {
            s.retry_counts.remove(&FailureSite::RunGenerator);
            s.validated_versions.push(script.version);
            if s.best_script.is_none() {
                s.best_script = Some(script.clone());
            }
            s.current = Some(script);
            s.last_stats = Some(stats);
            s.state = A::CollectCoverage;
        }
        (A::RunGenerator, Event::Failed(ev)) if ev.kind != FailureKind::ParseFailure => {
            s.failure = Some((FailureSite::RunGenerator, ev));
            s.state = A::Realign;
        }

        (A::CollectCoverage, Event::CoverageCollected { report, crashes }) => {
            let before = s.total_coverage.covered_branches();
            let merged = match merge(&s.total_coverage, &report) {
                Ok(m) => m,
                Err(_) => return Ok(finish(s, TerminationReason::TargetFailure)),
            };
            s.total_coverage = merged;
            let gain = s.total_coverage.covered_branches().saturating_sub(before);
            let script = s.current.clone().expect("a script ran before coverage collection");
            if gain > s.best_gain {
                s.best_gain = gain;
                s.best_script = Some(script.clone());
            }
            s.stalled_iterations = if gain == 0 { s.stalled_iterations + 1 } else { 0 };
            s.iteration += 1;
            let stats = s.last_stats.take().unwrap_or_default();
            s.iterations.push(IterationRecord {
                iteration: s.iteration,
                version: script.version,
                seeds_added: stats.added,
                duplicates: stats.duplicates,
                crashes,
                new_branches: gain,
                covered_branches: s.total_coverage.covered_branches(),
                total_branches: s.total_coverage.total_branches(),
                coverage: s.coverage_ratio(),
                dollars: s.ledger.dollars,
            });
            s.state = A::Summarize;
        }

        (A::Summarize, Event::Continue) => s.state = A::AwaitImprovedScript,
        (A::Summarize, Event::Stop(reason)) => return Ok(finish(s, reason)),

        (A::Realign, Event::Reply(text)) if s.retries_left() => {
            let (site, _) = s.failure.take().expect("realign has a failure");
            *s.retry_counts.entry(site).or_insert(0) += 1;
            s.pending_reply = Some(text);
            s.refusal = None;
            s.state = A::ValidateScript;
        }
        (A::Realign, Event::Refused(why)) if s.retries_left() => {
            let (site, _) = s.failure.take().expect("realign has a failure");
            *s.retry_counts.entry(site).or_insert(0) += 1;
            s.pending_reply = None;
            s.refusal = Some(why);
            s.state = A::ValidateScript;
        }
        (A::Realign, Event::RetriesExhausted) if !s.retries_left() => {
            s.failure = None;
            return Ok(finish(s, TerminationReason::RealignExhausted));
        }

        (_, e) => return Err(illegal(&s, &e)),
    }
    Ok(s)
}
