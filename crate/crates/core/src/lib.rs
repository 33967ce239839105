//! Coverage-guided synthesis of fuzzing seed generators.
//!
//! A language model writes small Python programs that each emit one test
//! case. Every generator is run many times, the resulting corpus is executed
//! against the target, and branch coverage projected onto the dynamic call
//! graph is fed back to the model to ask for a better generator.

pub mod agent;
pub mod context;
pub mod coverage;
pub mod llm;
pub mod orchestrator;
pub mod prompts;
pub mod runtime;
pub mod target;

pub use agent::{AgentState, FailureEvidence, FailureKind, SessionState, TerminationReason};
pub use context::{ContextBudget, ContextSlice, TokenEstimator};
pub use coverage::{
    BranchRecord, CallEdge, CoverageError, CoverageReport, CoverageState, DynamicCallGraph, FunctionCoverage,
    FunctionId,
};
pub use llm::{ChatMessage, CostLedger, Gateway, GatewayError, ProviderProfile, Role, Usage};
pub use orchestrator::{run, RunConfig, RunReport};
pub use prompts::PromptKind;
pub use runtime::{ExecutionPolicy, GeneratorScript, SeedCorpus};
pub use target::{Target, TargetSpec};
