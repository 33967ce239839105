//! Validation and execution of generator scripts.
//!
//! Invocation contract: `argv = [interpreter..., script_path, output_path]`,
//! stdin closed, stdout/stderr captured. Every invocation gets a fresh
//! directory that is its working directory and the only place it may write.

mod corpus;
pub mod sandbox;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use corpus::{content_hash, InsertOutcome, SeedCorpus, SeedEntry, MANIFEST_FILE};
pub use sandbox::{landlock_abi, run_sandboxed, ExecOutput, Isolation, SandboxCommand};

use crate::agent::{FailureEvidence, FailureKind};

/// Environment variable naming a per-invocation entropy file, set only when
/// the policy carries a fixed entropy source.
pub const ENTROPY_ENV: &str = "SEEDFORGE_ENTROPY_FILE";
const ENTROPY_BYTES: usize = 4096;
const SCRIPT_NAME: &str = "generator.py";
const OUTPUT_NAME: &str = "testcase.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorScript {
    pub source: String,
    pub version: u32,
    pub validated: bool,
    pub interpreter_tag: String,
    /// Index of the conversation message this script was extracted from.
    #[serde(default)]
    pub turn: Option<usize>,
}

impl GeneratorScript {
    pub fn new(source: impl Into<String>, version: u32) -> Self {
        Self {
            source: source.into(),
            version,
            validated: false,
            interpreter_tag: "python3".to_owned(),
            turn: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionPolicy {
    pub seeds_per_generator: usize,
    /// Defaults to the batch timeout when unset.
    #[serde(with = "opt_secs")]
    pub per_invocation_timeout: Option<Duration>,
    #[serde(with = "secs")]
    pub batch_timeout: Duration,
    pub max_seed_bytes: u64,
    pub parallelism: usize,
    pub interpreter: Vec<String>,
    pub entropy_file: Option<PathBuf>,
    pub isolation: Isolation,
    pub max_captured_bytes: usize,
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        Self {
            seeds_per_generator: 1000,
            per_invocation_timeout: None,
            batch_timeout: Duration::from_secs(30),
            max_seed_bytes: 1 << 20,
            parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            interpreter: vec!["python3".to_owned()],
            entropy_file: None,
            isolation: Isolation::default(),
            max_captured_bytes: 64 * 1024,
        }
    }
}

impl ExecutionPolicy {
    pub fn invocation_timeout(&self) -> Duration {
        self.per_invocation_timeout.unwrap_or(self.batch_timeout).min(self.batch_timeout)
    }

    fn interpreter_tag(&self) -> String {
        self.interpreter.join(" ")
    }
}

pub(crate) mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod opt_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Option::<f64>::deserialize(d)?
            .map(|v| Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("script version {0} has not been validated")]
    NotValidated(u32),
    #[error("failed to launch `{program}`: {source}")]
    Launch { program: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Why a dry run rejected a script.
#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("generator failed to execute")]
    ExecFailure(FailureEvidence),
    #[error("generator produced no output")]
    EmptyOutput(FailureEvidence),
    #[error("generator timed out")]
    Timeout(FailureEvidence),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl ValidateError {
    /// Evidence to feed back to the model; `None` for infrastructure faults.
    pub fn evidence(&self) -> Option<&FailureEvidence> {
        match self {
            ValidateError::ExecFailure(e) | ValidateError::EmptyOutput(e) | ValidateError::Timeout(e) => Some(e),
            ValidateError::Runtime(_) => None,
        }
    }

    pub fn into_evidence(self) -> Result<FailureEvidence, RuntimeError> {
        match self {
            ValidateError::ExecFailure(e) | ValidateError::EmptyOutput(e) | ValidateError::Timeout(e) => Ok(e),
            ValidateError::Runtime(r) => Err(r),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ProduceStats {
    pub invocations: usize,
    /// Invocations that wrote a non-empty seed within the size cap.
    pub produced: usize,
    pub added: usize,
    pub duplicates: usize,
    pub oversize: usize,
    pub empty: usize,
    pub failures: usize,
    pub timeouts: usize,
    pub batch_deadline_hit: bool,
    /// Hashes newly added to the corpus, in invocation order.
    pub added_hashes: Vec<String>,
}

enum Outcome {
    Seed(Vec<u8>),
    Empty,
    Oversize,
    Failed,
    TimedOut,
}

fn entropy_for(source: &[u8], label: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ENTROPY_BYTES);
    let mut counter = 0u64;
    while out.len() < ENTROPY_BYTES {
        let mut h = Sha256::new();
        h.update(source);
        h.update(label);
        h.update(counter.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(ENTROPY_BYTES);
    out
}

struct Invocation {
    output: ExecOutput,
    seed: Option<Vec<u8>>,
    output_len: Option<u64>,
}

fn invoke(
    policy: &ExecutionPolicy,
    script_path: &Path,
    dir: &Path,
    timeout: Duration,
    entropy: Option<&[u8]>,
    label: &[u8],
) -> Result<Invocation, RuntimeError> {
    fs::create_dir_all(dir)?;
    let output_path = dir.join(OUTPUT_NAME);
    let mut env = Vec::new();
    if let Some(src) = entropy {
        let p = dir.join("entropy.bin");
        fs::write(&p, entropy_for(src, label))?;
        env.push((ENTROPY_ENV.to_owned(), p.display().to_string()));
    }
    let mut argv = policy.interpreter.clone();
    argv.push(script_path.display().to_string());
    argv.push(output_path.display().to_string());
    let cmd = SandboxCommand {
        argv,
        workdir: dir.to_owned(),
        env,
        timeout,
        isolation: policy.isolation,
        max_file_bytes: policy.max_seed_bytes.saturating_mul(8).max(16 << 20),
        max_captured_bytes: policy.max_captured_bytes,
    };
    let output = run_sandboxed(&cmd).map_err(|source| RuntimeError::Launch {
        program: policy.interpreter.first().cloned().unwrap_or_default(),
        source,
    })?;
    let output_len = fs::metadata(&output_path).ok().map(|m| m.len());
    let seed = match output_len {
        Some(n) if n > 0 && n <= policy.max_seed_bytes => Some(fs::read(&output_path)?),
        _ => None,
    };
    Ok(Invocation { output, seed, output_len })
}

fn stack_trace_of(stderr: &str) -> String {
    stderr.rfind("Traceback (most recent call last):").map(|i| stderr[i..].to_owned()).unwrap_or_default()
}

fn read_entropy(policy: &ExecutionPolicy) -> Result<Option<Vec<u8>>, RuntimeError> {
    Ok(match &policy.entropy_file {
        Some(p) => Some(fs::read(p)?),
        None => None,
    })
}

/// Dry-run the script once; success iff exit 0 and a non-empty output file.
pub fn validate(script: &GeneratorScript, policy: &ExecutionPolicy) -> Result<GeneratorScript, ValidateError> {
    let dir = tempfile::Builder::new().prefix("seedforge-validate-").tempdir().map_err(RuntimeError::from)?;
    let script_path = dir.path().join(SCRIPT_NAME);
    fs::write(&script_path, &script.source).map_err(RuntimeError::from)?;
    let entropy = read_entropy(policy)?;
    let inv = invoke(
        policy,
        &script_path,
        &dir.path().join("run"),
        policy.batch_timeout,
        entropy.as_deref(),
        b"validate",
    )?;
    let out = &inv.output;
    if out.timed_out {
        let mut stderr = out.stderr.clone();
        if !stderr.is_empty() && !stderr.ends_with('\n') {
            stderr.push('\n');
        }
        stderr.push_str(&format!(
            "generator did not finish within {:.0} seconds and was killed",
            policy.batch_timeout.as_secs_f64()
        ));
        let mut ev = FailureEvidence::new(FailureKind::ExecFailure, stderr, stack_trace_of(&out.stderr), None);
        ev.timed_out = true;
        return Err(ValidateError::Timeout(ev));
    }
    if out.exit_code != Some(0) {
        let mut stderr = out.stderr.clone();
        if let (None, Some(sig)) = (out.exit_code, out.signal) {
            stderr.push_str(&format!("\nprocess terminated by signal {sig}"));
        }
        return Err(ValidateError::ExecFailure(FailureEvidence::new(
            FailureKind::ExecFailure,
            stderr,
            stack_trace_of(&out.stderr),
            out.exit_code,
        )));
    }
    if inv.seed.is_none() {
        let why = match inv.output_len {
            None => "the output file was not created".to_owned(),
            Some(0) => "the output file is empty".to_owned(),
            Some(n) => format!("the output file has {n} bytes, above the {} byte limit", policy.max_seed_bytes),
        };
        let mut stderr = why;
        if !out.stderr.is_empty() {
            stderr.push('\n');
            stderr.push_str(&out.stderr);
        }
        return Err(ValidateError::EmptyOutput(FailureEvidence::new(FailureKind::EmptyOutput, stderr, "", Some(0))));
    }
    Ok(GeneratorScript { validated: true, interpreter_tag: policy.interpreter_tag(), ..script.clone() })
}

/// Run a validated script up to `seeds_per_generator` times and add the
/// outputs to the corpus. Per-invocation failures are counted, not fatal.
pub fn produce_seeds(
    script: &GeneratorScript,
    policy: &ExecutionPolicy,
    corpus: &mut SeedCorpus,
) -> Result<ProduceStats, RuntimeError> {
    if !script.validated {
        return Err(RuntimeError::NotValidated(script.version));
    }
    let batch = tempfile::Builder::new().prefix("seedforge-batch-").tempdir()?;
    let script_path = batch.path().join(SCRIPT_NAME);
    fs::write(&script_path, &script.source)?;
    let entropy = read_entropy(policy)?;

    let start = Instant::now();
    let deadline = start + policy.batch_timeout;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Outcome)>> = Mutex::new(Vec::new());
    let launch_error: Mutex<Option<RuntimeError>> = Mutex::new(None);
    let workers = policy.parallelism.clamp(1, policy.seeds_per_generator.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if launch_error.lock().expect("poisoned").is_some() {
                    break;
                }
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= policy.seeds_per_generator {
                    break;
                }
                let timeout = policy.invocation_timeout().min(deadline - now);
                let dir = batch.path().join(format!("inv-{i:06}"));
                let label = format!("seed-{i}");
                let outcome = match invoke(policy, &script_path, &dir, timeout, entropy.as_deref(), label.as_bytes()) {
                    Ok(inv) => {
                        let o = if inv.output.timed_out {
                            Outcome::TimedOut
                        } else if !inv.output.success() {
                            Outcome::Failed
                        } else if let Some(seed) = inv.seed {
                            Outcome::Seed(seed)
                        } else if inv.output_len.unwrap_or(0) > policy.max_seed_bytes {
                            Outcome::Oversize
                        } else {
                            Outcome::Empty
                        };
                        let _ = fs::remove_dir_all(&dir);
                        o
                    }
                    Err(e) => {
                        *launch_error.lock().expect("poisoned") = Some(e);
                        break;
                    }
                };
                results.lock().expect("poisoned").push((i, outcome));
            });
        }
    });
    if let Some(e) = launch_error.into_inner().expect("poisoned") {
        return Err(e);
    }

    let mut results = results.into_inner().expect("poisoned");
    results.sort_by_key(|(i, _)| *i);
    let mut stats = ProduceStats {
        invocations: results.len(),
        batch_deadline_hit: results.len() < policy.seeds_per_generator,
        ..Default::default()
    };
    for (_, outcome) in results {
        match outcome {
            Outcome::Seed(bytes) => {
                stats.produced += 1;
                match corpus.insert(&bytes, script.version)? {
                    InsertOutcome::Added(h) => {
                        stats.added += 1;
                        stats.added_hashes.push(h);
                    }
                    InsertOutcome::Duplicate(_) => stats.duplicates += 1,
                }
            }
            Outcome::Empty => stats.empty += 1,
            Outcome::Oversize => stats.oversize += 1,
            Outcome::Failed => stats.failures += 1,
            Outcome::TimedOut => stats.timeouts += 1,
        }
    }
    corpus.flush()?;
    Ok(stats)
}

/// Execution backend used by the agent loop.
pub trait ScriptRunner {
    fn validate(&self, script: &GeneratorScript) -> Result<GeneratorScript, ValidateError>;
    fn produce(&self, script: &GeneratorScript, corpus: &mut SeedCorpus) -> Result<ProduceStats, RuntimeError>;
}

/// Runs scripts as sandboxed child processes.
#[derive(Clone, Debug, Default)]
pub struct SubprocessRunner {
    pub policy: ExecutionPolicy,
}

impl SubprocessRunner {
    pub fn new(policy: ExecutionPolicy) -> Self {
        Self { policy }
    }
}

impl ScriptRunner for SubprocessRunner {
    fn validate(&self, script: &GeneratorScript) -> Result<GeneratorScript, ValidateError> {
        validate(script, &self.policy)
    }

    fn produce(&self, script: &GeneratorScript, corpus: &mut SeedCorpus) -> Result<ProduceStats, RuntimeError> {
        produce_seeds(script, &self.policy, corpus)
    }
}
