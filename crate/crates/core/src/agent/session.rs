//! Effectful driver around the pure state machine.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::json;
use thiserror::Error;

use super::machine::{step, stop_reason, AgentState, Event, Limits, SessionState, StepError, TerminationReason};
use super::{extract_script, FailureEvidence, FailureKind};
use crate::context::{
    coverage_summary, prune_to_budget, render_feedback_context, select_partially_covered, ContextBudget,
};
use crate::coverage::build_call_graph;
use crate::llm::{ChatMessage, CostLedger, Gateway, GatewayError, Role};
use crate::prompts::{render, render_realign, render_static, PromptKind};
use crate::runtime::{GeneratorScript, ProduceStats, RuntimeError, ScriptRunner, SeedCorpus, ValidateError};
use crate::target::{CrashRecord, Target};

/// Monotonic time source, as an offset from an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn advance(&self, by: Duration) {
        *self.now.lock().expect("poisoned") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("poisoned")
    }
}

/// Session artifacts: `corpus/`, `generators/`, `crashes/`, `logs/` and
/// `report.json` under one root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn create(root: impl Into<PathBuf>) -> io::Result<Self> {
        let ws = Self { root: root.into() };
        for dir in [ws.corpus_dir(), ws.generators_dir(), ws.crashes_dir(), ws.logs_dir()] {
            fs::create_dir_all(dir)?;
        }
        Ok(ws)
    }

    /// Refer to an existing workspace without creating anything.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn generators_dir(&self) -> PathBuf {
        self.root.join("generators")
    }

    pub fn generator_path(&self, version: u32) -> PathBuf {
        self.generators_dir().join(format!("gen_v{version}.py"))
    }

    pub fn crashes_dir(&self) -> PathBuf {
        self.root.join("crashes")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn run_log_path(&self) -> PathBuf {
        self.logs_dir().join("run.jsonl")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.logs_dir().join("transcript.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("workspace i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Step(#[from] StepError),
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub state: SessionState,
    pub corpus: SeedCorpus,
    pub crashes: Vec<CrashRecord>,
    pub seeds_produced: usize,
    pub duplicates: usize,
    pub transitions: u64,
    /// What triggered a fatal stop, when one happened.
    pub detail: Option<String>,
}

/// One agent session against one target.
pub struct Session<'a> {
    gateway: &'a Gateway,
    runner: &'a dyn ScriptRunner,
    target: &'a dyn Target,
    clock: &'a dyn Clock,
    workspace: Workspace,
    limits: Limits,
    ledger: CostLedger,
}

struct Driver<'s, 'a> {
    session: &'s Session<'a>,
    corpus: SeedCorpus,
    transcript: Vec<ChatMessage>,
    log: BufWriter<fs::File>,
    seq: u64,
    crashes: Vec<CrashRecord>,
    produced: usize,
    duplicates: usize,
    detail: Option<String>,
    harness: String,
}

const NO_SUGGESTIONS: &str = "(The analysis step returned no suggestions.)";

impl<'a> Session<'a> {
    pub fn new(
        gateway: &'a Gateway,
        runner: &'a dyn ScriptRunner,
        target: &'a dyn Target,
        clock: &'a dyn Clock,
        workspace: Workspace,
    ) -> Self {
        Self { gateway, runner, target, clock, workspace, limits: Limits::default(), ledger: CostLedger::default() }
    }

    pub fn with_limits(mut self, limits: Limits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_ledger(mut self, ledger: CostLedger) -> Self {
        self.ledger = ledger;
        self
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    /// Drive the machine until it reaches Done or Aborted.
    pub fn run(&self) -> Result<SessionOutcome, SessionError> {
        let ws = Workspace::create(self.workspace.root())?;
        let mut d = Driver {
            session: self,
            corpus: SeedCorpus::open(ws.corpus_dir())?,
            transcript: Vec::new(),
            log: BufWriter::new(fs::File::create(ws.run_log_path())?),
            seq: 0,
            crashes: Vec::new(),
            produced: 0,
            duplicates: 0,
            detail: None,
            harness: harness_code(self.target, self.gateway),
        };
        let mut s = SessionState::new(self.limits, self.ledger.clone(), self.clock.now());
        while !s.state.is_terminal() {
            let event = d.effect(&mut s)?;
            let from = s.state;
            let name = event.name();
            s = step(s, event)?;
            d.log_transition(from, name, &s)?;
        }
        d.log.flush()?;
        fs::write(ws.transcript_path(), serde_json::to_vec_pretty(&d.transcript).map_err(io::Error::from)?)?;
        fs::write(
            ws.crashes_dir().join("index.json"),
            serde_json::to_vec_pretty(&d.crashes).map_err(io::Error::from)?,
        )?;
        d.corpus.flush()?;
        Ok(SessionOutcome {
            state: s,
            corpus: d.corpus,
            crashes: d.crashes,
            seeds_produced: d.produced,
            duplicates: d.duplicates,
            transitions: d.seq,
            detail: d.detail,
        })
    }
}

/// Full harness file when it takes at most a quarter of the window, else the
/// entry function alone.
fn harness_code(target: &dyn Target, gateway: &Gateway) -> String {
    let full = target.harness_source();
    let window = gateway.profile().context_window_tokens;
    if !full.trim().is_empty() && gateway.estimator().estimate(&full) <= window / 4 {
        return full;
    }
    let entry = target.entry_source();
    if entry.trim().is_empty() {
        full
    } else {
        entry
    }
}

fn improvement_request(harness: &str, script: &GeneratorScript, suggestions: &str, feedback: &str) -> String {
    let user = render(PromptKind::UserPrompt, [("harness_code", harness)]).expect("user template slots");
    let improve = render(
        PromptKind::ImprovePrompt,
        [
            ("version", script.version.to_string().as_str()),
            ("script", script.source.trim_end()),
            ("suggestions", suggestions.trim()),
            ("coverage_report", feedback.trim_end()),
        ],
    )
    .expect("improve template slots");
    format!("{user}\n\n{improve}")
}

impl Driver<'_, '_> {
    fn push(&mut self, s: &mut SessionState, msg: ChatMessage) {
        self.transcript.push(msg.clone());
        s.history.push(msg);
    }

    fn fatal(&mut self, reason: TerminationReason, detail: impl Into<String>) -> Event {
        let detail = detail.into();
        if reason.is_success() {
            log::info!("{reason}: {detail}");
        } else {
            log::error!("{reason}: {detail}");
        }
        self.detail = Some(detail);
        Event::Fatal(reason)
    }

    fn effect(&mut self, s: &mut SessionState) -> Result<Event, SessionError> {
        Ok(match s.state {
            AgentState::Init => {
                self.push(s, ChatMessage::system(render_static(PromptKind::SystemPrompt)));
                let user = render(PromptKind::UserPrompt, [("harness_code", self.harness.as_str())])
                    .expect("user template slots");
                self.push(s, ChatMessage::user(user));
                self.push(s, ChatMessage::user(render_static(PromptKind::ExampleScriptPrompt)));
                Event::Started
            }
            AgentState::AwaitInitialScript | AgentState::AwaitImprovedScript => self.ask(s),
            AgentState::ValidateScript => match &s.pending_reply {
                Some(text) => {
                    let turn = s.history.iter().rposition(|m| m.role == Role::Assistant);
                    match extract_script(&ChatMessage::assistant(text.as_str()), s.next_version()) {
                        Ok(mut script) => {
                            script.turn = turn;
                            Event::ScriptExtracted(script)
                        }
                        Err(ev) => Event::Failed(ev),
                    }
                }
                None => Event::Failed(FailureEvidence::parse(format!(
                    "No usable response was received ({}). Reply with the complete generator script.",
                    s.refusal.as_deref().unwrap_or("empty reply")
                ))),
            },
            AgentState::RunGenerator => self.run_generator(s)?,
            AgentState::CollectCoverage => self.collect(s)?,
            AgentState::Summarize => match stop_reason(s, self.session.clock.now()) {
                Some(reason) => Event::Stop(reason),
                None => self.summarize(s),
            },
            AgentState::Realign => {
                if !s.retries_left() {
                    Event::RetriesExhausted
                } else {
                    let (_, ev) = s.failure.as_ref().expect("realign has a failure");
                    let prompt = render_realign(ev);
                    self.push(s, ChatMessage::user(prompt));
                    self.ask(s)
                }
            }
            AgentState::Done | AgentState::Aborted => unreachable!("driver stops at terminal states"),
        })
    }

    /// Drop the oldest exchange after the system prompt. Never drops the
    /// pending request.
    fn drop_oldest_exchange(s: &mut SessionState) -> bool {
        let start = s.history.iter().position(|m| m.role != Role::System).unwrap_or(s.history.len());
        let Some(first_reply) = s.history.iter().skip(start).position(|m| m.role == Role::Assistant) else {
            return false;
        };
        let end = start + first_reply + 1;
        if end >= s.history.len() {
            return false;
        }
        s.history.drain(start..end);
        true
    }

    fn trim_to(&self, s: &mut SessionState, tokens: usize) {
        while self.session.gateway.estimate_history(&s.history) > tokens {
            if !Self::drop_oldest_exchange(s) {
                break;
            }
        }
    }

    fn ask(&mut self, s: &mut SessionState) -> Event {
        let gw = self.session.gateway;
        let profile = gw.profile();
        let output = (profile.max_output_tokens as usize).min(profile.context_window_tokens / 2);
        let limit = profile.context_window_tokens.saturating_sub(output + 1);
        self.trim_to(s, limit);
        loop {
            match gw.send(&s.history, &mut s.ledger) {
                Ok(out) => {
                    let text = out.message.content.clone();
                    self.push(s, out.message);
                    return Event::Reply(text);
                }
                Err(GatewayError::ProviderRefusal(why)) => return Event::Refused(why),
                Err(GatewayError::ContextOverflow { .. }) if Self::drop_oldest_exchange(s) => continue,
                Err(GatewayError::ReplayExhausted) => {
                    return self.fatal(TerminationReason::ReplayExhausted, GatewayError::ReplayExhausted.to_string())
                }
                Err(e) => return self.fatal(TerminationReason::ProviderFailure, e.to_string()),
            }
        }
    }

    fn run_generator(&mut self, s: &mut SessionState) -> Result<Event, SessionError> {
        let script = s.current.clone().expect("RunGenerator has a script");
        let runner = self.session.runner;
        let validated = match runner.validate(&script) {
            Ok(v) => v,
            Err(ValidateError::Runtime(e)) => return Ok(self.fatal(TerminationReason::RuntimeFailure, e.to_string())),
            Err(e) => return Ok(Event::Failed(e.into_evidence().expect("not a runtime error"))),
        };
        let stats = match runner.produce(&validated, &mut self.corpus) {
            Ok(st) => st,
            Err(RuntimeError::NotValidated(v)) => unreachable!("script {v} was validated above"),
            Err(e) => return Ok(self.fatal(TerminationReason::RuntimeFailure, e.to_string())),
        };
        self.produced += stats.produced;
        self.duplicates += stats.duplicates;
        if stats.produced == 0 {
            return Ok(Event::Failed(batch_failure(&stats)));
        }
        fs::write(self.session.workspace.generator_path(validated.version), &validated.source)?;
        Ok(Event::SeedsProduced { script: validated, stats })
    }

    fn collect(&mut self, s: &mut SessionState) -> Result<Event, SessionError> {
        let added = s.last_stats.as_ref().map(|st| st.added_hashes.clone()).unwrap_or_default();
        if added.is_empty() {
            return Ok(Event::CoverageCollected { report: Default::default(), crashes: 0 });
        }
        let batch = self.corpus.subset(&added);
        match self.session.target.run_corpus(&batch) {
            Ok(run) => {
                let n = run.crashes.len();
                for c in &run.crashes {
                    if let Some(src) = self.corpus.path_of(&c.seed) {
                        fs::copy(src, self.session.workspace.crashes_dir().join(&c.seed))?;
                    }
                }
                self.crashes.extend(run.crashes);
                Ok(Event::CoverageCollected { report: run.report, crashes: n })
            }
            Err(e) => Ok(self.fatal(TerminationReason::TargetFailure, e.to_string())),
        }
    }

    fn summarize(&mut self, s: &mut SessionState) -> Event {
        let gw = self.session.gateway;
        let est = gw.estimator();
        let profile = gw.profile();
        let window = profile.context_window_tokens;
        let script = s.current.clone().expect("a script ran this iteration");

        let graph = match build_call_graph(&s.total_coverage, &self.session.target.entry()) {
            Ok(g) => g,
            Err(e) => return self.fatal(TerminationReason::TargetFailure, e.to_string()),
        };
        let candidates = select_partially_covered(&graph);

        // Keep at most half the window for history so the feedback has room.
        self.trim_to(s, window / 2);
        let summary_base = render(PromptKind::SummaryPrompt, [("coverage_report", "")]).expect("summary slots");
        let improve_base = improvement_request(&self.harness, &script, NO_SUGGESTIONS, "");
        let fixed = gw.estimate_history(&s.history)
            + est.estimate(&summary_base)
            + est.estimate(&improve_base)
            + 2 * profile.max_output_tokens as usize
            + 64;
        // The feedback appears in both the summary and the improvement request.
        let reserved = fixed + window.saturating_sub(fixed) / 2;
        let slice = match ContextBudget::new(window, reserved).and_then(|b| prune_to_budget(&candidates, &graph, &b, est)) {
            Ok(sl) => sl,
            Err(e) => return self.fatal(TerminationReason::ProviderFailure, format!("context window too small: {e}")),
        };
        let feedback = render_feedback_context(&slice, &script, &coverage_summary(&s.total_coverage));

        let summary = render(PromptKind::SummaryPrompt, [("coverage_report", feedback.as_str())]).expect("summary slots");
        self.push(s, ChatMessage::user(summary));
        let suggestions = match self.ask(s) {
            Event::Reply(text) => text,
            Event::Refused(_) => {
                s.history.pop();
                NO_SUGGESTIONS.to_owned()
            }
            fatal => return fatal,
        };
        let request = improvement_request(&self.harness, &script, &suggestions, &feedback);
        self.push(s, ChatMessage::user(request));
        Event::Continue
    }

    fn log_transition(&mut self, from: AgentState, event: &str, s: &SessionState) -> io::Result<()> {
        self.seq += 1;
        let record = json!({
            "seq": self.seq,
            "from": from,
            "to": s.state,
            "event": event,
            "iteration": s.iteration,
            "ledger": s.ledger,
            "coverage": s.coverage_ratio(),
            "covered_branches": s.total_coverage.covered_branches(),
            "total_branches": s.total_coverage.total_branches(),
            "termination": s.termination,
        });
        log::debug!("{from} --{event}--> {}", s.state);
        serde_json::to_writer(&mut self.log, &record)?;
        self.log.write_all(b"\n")
    }
}

fn batch_failure(stats: &ProduceStats) -> FailureEvidence {
    let summary = format!(
        "None of the {} generator runs wrote a usable test case: {} failed, {} timed out, {} wrote an empty file, {} exceeded the size limit.",
        stats.invocations, stats.failures, stats.timeouts, stats.empty, stats.oversize
    );
    if stats.failures + stats.timeouts > 0 {
        FailureEvidence::new(FailureKind::ExecFailure, summary, "", None)
    } else {
        FailureEvidence::new(FailureKind::EmptyOutput, summary, "", Some(0))
    }
}
