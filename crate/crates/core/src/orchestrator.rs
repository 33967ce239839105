//! Session wiring, configuration and the persisted run report.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    AgentState, Clock, IterationRecord, Limits, Session, SessionError, SessionOutcome, SystemClock,
    TerminationReason, Workspace, DEFAULT_MAX_ITERATIONS, DEFAULT_MAX_REALIGN,
};
use crate::llm::{
    default_profiles, find_profile, parse_profiles, AnthropicProvider, ApiKind, ChatProvider, CostLedger, Gateway,
    OpenAiProvider, ProviderProfile, ReplayTranscript, ScriptedProvider,
};
use crate::runtime::{ExecutionPolicy, ScriptRunner, SubprocessRunner};
use crate::target::{self, TargetSpec};

pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub model: String,
    /// Explicit provider profile; looked up by `model` in the price table when unset.
    #[serde(default)]
    pub provider: Option<ProviderProfile>,
    /// Replacement price table (same JSON layout as the bundled one).
    #[serde(default)]
    pub price_table: Option<PathBuf>,
    #[serde(with = "crate::runtime::secs")]
    pub wall_limit: Duration,
    pub soft_limit_dollars: f64,
    pub max_iterations: u32,
    pub max_realign: u32,
    pub stop_on_convergence: bool,
    pub policy: ExecutionPolicy,
    pub workspace: PathBuf,
    /// Replay transcript; switches to the scripted provider.
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(target: TargetSpec, workspace: impl Into<PathBuf>) -> Self {
        Self {
            target,
            model: DEFAULT_MODEL.to_owned(),
            provider: None,
            price_table: None,
            wall_limit: Duration::from_secs(30 * 60),
            soft_limit_dollars: 0.5,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            max_realign: DEFAULT_MAX_REALIGN,
            stop_on_convergence: false,
            policy: ExecutionPolicy::default(),
            workspace: workspace.into(),
            replay: None,
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            max_realign: self.max_realign,
            max_iterations: self.max_iterations,
            wall_limit: self.wall_limit,
            stop_on_convergence: self.stop_on_convergence,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_owned()));
        if self.wall_limit.is_zero() {
            return bad("wall limit must be positive");
        }
        if !(self.soft_limit_dollars.is_finite() && self.soft_limit_dollars > 0.0) {
            return bad("cost limit must be a positive number of dollars");
        }
        if self.max_iterations == 0 {
            return bad("max iterations must be positive");
        }
        if self.policy.seeds_per_generator == 0 {
            return bad("seeds per generator must be positive");
        }
        if self.policy.batch_timeout.is_zero() || self.policy.per_invocation_timeout.is_some_and(|t| t.is_zero()) {
            return bad("timeouts must be positive");
        }
        if self.policy.max_seed_bytes == 0 || self.policy.parallelism == 0 || self.policy.interpreter.is_empty() {
            return bad("execution policy needs a positive seed size cap, parallelism and an interpreter");
        }
        fs::create_dir_all(&self.workspace)
            .and_then(|_| tempfile::tempfile_in(&self.workspace).map(drop))
            .map_err(|e| OrchestratorError::Config(format!("workspace {} is not writable: {e}", self.workspace.display())))
    }

    fn profile(&self) -> Result<ProviderProfile, OrchestratorError> {
        if let Some(p) = &self.provider {
            p.validate().map_err(|e| OrchestratorError::Config(e.to_string()))?;
            return Ok(p.clone());
        }
        let table = match &self.price_table {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
                parse_profiles(&text).map_err(|e| OrchestratorError::Config(e.to_string()))?
            }
            None => default_profiles(),
        };
        find_profile(&table, &self.model)
            .cloned()
            .ok_or_else(|| OrchestratorError::Config(format!("unknown model `{}`; add it to the price table", self.model)))
    }

    /// Resolve the chat provider without contacting it.
    pub fn gateway(&self) -> Result<Gateway, OrchestratorError> {
        let profile = self.profile()?;
        let cfg = |e: crate::llm::GatewayError| OrchestratorError::Config(e.to_string());
        let provider: Box<dyn ChatProvider> = match (&self.replay, profile.api) {
            (Some(path), _) => Box::new(ScriptedProvider::new(ReplayTranscript::load(path).map_err(cfg)?)),
            (None, ApiKind::OpenAi) => Box::new(OpenAiProvider::from_env(&profile).map_err(cfg)?),
            (None, ApiKind::Anthropic) => Box::new(AnthropicProvider::from_env(&profile).map_err(cfg)?),
            (None, ApiKind::Scripted) => {
                return Err(OrchestratorError::Config(format!(
                    "model `{}` needs a replay transcript",
                    profile.model
                )))
            }
        };
        Ok(Gateway::new(provider, profile))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub final_state: AgentState,
    pub termination: TerminationReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub coverage: f64,
    pub covered_branches: usize,
    pub total_branches: usize,
    /// Coverage gained by each iteration.
    pub coverage_deltas: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub generator_count: usize,
    pub best_version: Option<u32>,
    pub seeds_produced: usize,
    pub seeds_unique: usize,
    pub seeds_deduplicated: usize,
    pub crashes: usize,
    pub ledger: CostLedger,
    pub elapsed_secs: f64,
}

impl RunReport {
    fn from_outcome(model: &str, o: &SessionOutcome, elapsed: Duration) -> Self {
        let s = &o.state;
        let mut prev = 0.0;
        let coverage_deltas = s
            .iterations
            .iter()
            .map(|it| {
                let d = it.coverage - prev;
                prev = it.coverage;
                d
            })
            .collect();
        Self {
            model: model.to_owned(),
            final_state: s.state,
            termination: s.termination.unwrap_or(TerminationReason::Aborted),
            detail: o.detail.clone(),
            coverage: s.coverage_ratio(),
            covered_branches: s.total_coverage.covered_branches(),
            total_branches: s.total_coverage.total_branches(),
            coverage_deltas,
            iterations: s.iterations.clone(),
            generator_count: s.validated_versions.len(),
            best_version: s.best_script.as_ref().map(|b| b.version),
            seeds_produced: o.seeds_produced,
            seeds_unique: o.corpus.len(),
            seeds_deduplicated: o.duplicates,
            crashes: o.crashes.len(),
            ledger: s.ledger.clone(),
            elapsed_secs: elapsed.as_secs_f64(),
        }
    }

    fn aborted(model: &str, ledger: CostLedger, detail: String, elapsed: Duration) -> Self {
        Self {
            model: model.to_owned(),
            final_state: AgentState::Aborted,
            termination: TerminationReason::Aborted,
            detail: Some(detail),
            coverage: 0.0,
            covered_branches: 0,
            total_branches: 0,
            coverage_deltas: Vec::new(),
            iterations: Vec::new(),
            generator_count: 0,
            best_version: None,
            seeds_produced: 0,
            seeds_unique: 0,
            seeds_deduplicated: 0,
            crashes: 0,
            ledger,
            elapsed_secs: elapsed.as_secs_f64(),
        }
    }

    /// 0 iff the session stopped on an allowance with a validated generator.
    pub fn exit_code(&self) -> i32 {
        if self.termination.is_success() && self.generator_count > 0 {
            0
        } else {
            1
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Termination: {} ({})", self.termination, self.final_state);
        if let Some(d) = &self.detail {
            let _ = writeln!(s, "Detail: {d}");
        }
        let _ = writeln!(
            s,
            "Coverage: {:.2}% ({}/{} branches)",
            self.coverage * 100.0,
            self.covered_branches,
            self.total_branches
        );
        let _ = writeln!(s, "Iterations: {}", self.iterations.len());
        match self.best_version {
            Some(v) => {
                let _ = writeln!(s, "Generators: {} validated, best is version {v}", self.generator_count);
            }
            None => {
                let _ = writeln!(s, "Generators: {} validated", self.generator_count);
            }
        }
        let _ = writeln!(
            s,
            "Seeds: {} unique, {} produced, {} duplicates",
            self.seeds_unique, self.seeds_produced, self.seeds_deduplicated
        );
        let _ = writeln!(s, "Crashes: {}", self.crashes);
        let _ = writeln!(
            s,
            "Cost: ${:.4} of ${:.2} ({} calls, {} prompt and {} completion tokens, model {})",
            self.ledger.dollars,
            self.ledger.soft_limit_dollars,
            self.ledger.calls,
            self.ledger.prompt_tokens,
            self.ledger.completion_tokens,
            self.model
        );
        let _ = writeln!(s, "Elapsed: {:.1}s", self.elapsed_secs);
        s
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no run report in {0}")]
    MissingReport(PathBuf),
    #[error("unreadable run report {path}: {message}")]
    BadReport { path: PathBuf, message: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn write_report(ws: &Workspace, report: &RunReport) -> Result<(), OrchestratorError> {
    let body = serde_json::to_vec_pretty(report).map_err(io::Error::from)?;
    fs::write(ws.report_path(), body)?;
    Ok(())
}

/// Run one session with subprocess generators and the real clock.
pub fn run(config: &RunConfig) -> Result<RunReport, OrchestratorError> {
    run_with(config, &SubprocessRunner::new(config.policy.clone()), &SystemClock::default())
}

/// Run one session with an explicit script runner and clock.
pub fn run_with(config: &RunConfig, runner: &dyn ScriptRunner, clock: &dyn Clock) -> Result<RunReport, OrchestratorError> {
    config.validate()?;
    let gateway = config.gateway()?;
    let started = Instant::now();
    let ws = Workspace::create(&config.workspace)?;
    let model = gateway.profile().model.clone();
    let ledger = CostLedger::new(config.soft_limit_dollars);
    let built = match target::build(&config.target) {
        Ok(t) => t,
        Err(e) => {
            log::error!("{e}");
            let report = RunReport::aborted(&model, ledger, e.to_string(), started.elapsed());
            write_report(&ws, &report)?;
            return Ok(report);
        }
    };
    let session = Session::new(&gateway, runner, built.as_ref(), clock, ws.clone())
        .with_limits(config.limits())
        .with_ledger(ledger);
    let outcome = session.run()?;
    let report = RunReport::from_outcome(&model, &outcome, started.elapsed());
    write_report(&ws, &report)?;
    Ok(report)
}

pub fn load_report(workspace: &Path) -> Result<RunReport, OrchestratorError> {
    let path = Workspace::at(workspace).report_path();
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(OrchestratorError::MissingReport(path)),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_slice(&bytes).map_err(|e| OrchestratorError::BadReport { path, message: e.to_string() })
}

/// Human-readable summary of a finished workspace.
pub fn report(workspace: &Path) -> Result<String, OrchestratorError> {
    let r = load_report(workspace)?;
    Ok(format!("Workspace: {}\n{}", workspace.display(), r.summary()))
}
