use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use seedforge_core::orchestrator::{self, OrchestratorError, RunConfig, RunReport, DEFAULT_MODEL};
use seedforge_core::target::{TargetKind, TargetSpec, DEFAULT_ENTRY};

#[derive(Parser)]
#[command(name = "seedforge", version, about = "Grow fuzzing seed generators with a language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a generator-synthesis session against one or more targets.
    Run(Box<RunArgs>),
    /// Summarise a finished workspace.
    Report {
        /// Workspace directory holding report.json.
        workspace: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Synthetic,
    Toolchain,
}

#[derive(Args)]
struct RunArgs {
    /// Synthetic program (.json) or harness source directory. Repeatable.
    #[arg(long, required_unless_present = "config")]
    target: Vec<PathBuf>,
    /// Target kind; inferred from the path when omitted.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Build command for toolchain targets, run in the source directory.
    #[arg(long)]
    build: Option<String>,
    /// Built harness binary, relative to the source directory.
    #[arg(long)]
    binary: Option<PathBuf>,
    /// Harness source file shown to the model.
    #[arg(long)]
    harness: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_ENTRY)]
    entry: String,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    /// Wall-clock limit, e.g. 1800, 90s, 30m, 1h.
    #[arg(long, value_parser = parse_duration, default_value = "30m")]
    wall_limit: Duration,
    /// Soft cost limit in dollars, checked between iterations.
    #[arg(long, default_value_t = 0.5)]
    cost_limit: f64,
    #[arg(long, default_value_t = 1000)]
    seeds_per_gen: usize,
    /// Time allowed for one generator's whole batch.
    #[arg(long, value_parser = parse_duration, default_value = "30s")]
    batch_timeout: Duration,
    #[arg(long, default_value = "seedforge-workspace")]
    workspace: PathBuf,
    /// Replay transcript; replaces the live provider.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Sessions to run at once when several targets are given.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// TOML configuration file; its values override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<u32>,
    /// Stop once two iterations in a row add no coverage.
    #[arg(long)]
    converge: bool,
    /// Replacement JSON price table.
    #[arg(long)]
    price_table: Option<PathBuf>,
    /// Fixed entropy source handed to generators for reproducible runs.
    #[arg(long)]
    entropy_file: Option<PathBuf>,
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    let (num, unit) = match s.find(|c: char| !(c.is_ascii_digit() || c == '.')) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, "s"),
    };
    let n: f64 = num.parse().map_err(|_| format!("invalid duration `{s}`"))?;
    let secs = match unit {
        "s" | "sec" | "secs" => n,
        "m" | "min" | "mins" => n * 60.0,
        "h" | "hr" | "hours" => n * 3600.0,
        _ => return Err(format!("unknown duration unit `{unit}` (use s, m or h)")),
    };
    if !(secs.is_finite() && secs > 0.0) {
        return Err(format!("duration `{s}` must be positive"));
    }
    Ok(Duration::from_secs_f64(secs))
}

/// Config file schema. Every key is optional and overrides the matching flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<String>,
    wall_limit_secs: Option<f64>,
    cost_limit: Option<f64>,
    max_iterations: Option<u32>,
    max_realign: Option<u32>,
    stop_on_convergence: Option<bool>,
    workspace: Option<PathBuf>,
    replay: Option<PathBuf>,
    price_table: Option<PathBuf>,
    jobs: Option<usize>,
    #[serde(default)]
    target: FileTarget,
    #[serde(default)]
    policy: FilePolicy,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTarget {
    kind: Option<TargetKind>,
    paths: Option<Vec<PathBuf>>,
    entry: Option<String>,
    build_command: Option<String>,
    binary: Option<PathBuf>,
    harness: Option<PathBuf>,
    profdata_command: Option<String>,
    cov_command: Option<String>,
    seed_timeout_secs: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePolicy {
    seeds_per_generator: Option<usize>,
    batch_timeout_secs: Option<f64>,
    per_invocation_timeout_secs: Option<f64>,
    max_seed_bytes: Option<u64>,
    parallelism: Option<usize>,
    interpreter: Option<Vec<String>>,
    entropy_file: Option<PathBuf>,
}

fn secs(v: f64, what: &str) -> Result<Duration> {
    if !(v.is_finite() && v > 0.0) {
        bail!("{what} must be positive");
    }
    Ok(Duration::from_secs_f64(v))
}

fn infer_kind(path: &Path) -> TargetKind {
    if path.is_file() && path.extension().is_some_and(|e| e == "json") {
        TargetKind::Synthetic
    } else {
        TargetKind::Toolchain
    }
}

/// One config per target, each with its own workspace when there are several.
fn build_configs(args: &RunArgs) -> Result<(Vec<RunConfig>, usize)> {
    let file: FileConfig = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let targets = file.target.paths.clone().unwrap_or_else(|| args.target.clone());
    if targets.is_empty() {
        bail!("no target given");
    }
    let workspace = file.workspace.clone().unwrap_or_else(|| args.workspace.clone());
    let mut out = Vec::new();
    for (i, path) in targets.iter().enumerate() {
        let kind = file.target.kind.or(args.kind.map(|k| match k {
            KindArg::Synthetic => TargetKind::Synthetic,
            KindArg::Toolchain => TargetKind::Toolchain,
        }));
        let mut spec = TargetSpec::synthetic(path);
        spec.kind = kind.unwrap_or_else(|| infer_kind(path));
        spec.entry = file.target.entry.clone().unwrap_or_else(|| args.entry.clone());
        spec.build_command = file.target.build_command.clone().or_else(|| args.build.clone());
        spec.binary = file.target.binary.clone().or_else(|| args.binary.clone());
        spec.harness = file.target.harness.clone().or_else(|| args.harness.clone());
        if let Some(c) = &file.target.profdata_command {
            spec.profdata_command = c.clone();
        }
        if let Some(c) = &file.target.cov_command {
            spec.cov_command = c.clone();
        }
        if let Some(t) = file.target.seed_timeout_secs {
            spec.seed_timeout = secs(t, "seed_timeout_secs")?;
        }
        let ws = if targets.len() == 1 {
            workspace.clone()
        } else {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            workspace.join(format!("{i:02}-{stem}"))
        };
        let mut c = RunConfig::new(spec, ws);
        c.model = file.model.clone().unwrap_or_else(|| args.model.clone());
        c.wall_limit = match file.wall_limit_secs {
            Some(v) => secs(v, "wall_limit_secs")?,
            None => args.wall_limit,
        };
        c.soft_limit_dollars = file.cost_limit.unwrap_or(args.cost_limit);
        if let Some(n) = file.max_iterations.or(args.max_iterations) {
            c.max_iterations = n;
        }
        if let Some(n) = file.max_realign {
            c.max_realign = n;
        }
        c.stop_on_convergence = file.stop_on_convergence.unwrap_or(args.converge);
        c.replay = file.replay.clone().or_else(|| args.replay.clone());
        c.price_table = file.price_table.clone().or_else(|| args.price_table.clone());
        let p = &file.policy;
        c.policy.seeds_per_generator = p.seeds_per_generator.unwrap_or(args.seeds_per_gen);
        c.policy.batch_timeout = match p.batch_timeout_secs {
            Some(v) => secs(v, "batch_timeout_secs")?,
            None => args.batch_timeout,
        };
        if let Some(v) = p.per_invocation_timeout_secs {
            c.policy.per_invocation_timeout = Some(secs(v, "per_invocation_timeout_secs")?);
        }
        if let Some(v) = p.max_seed_bytes {
            c.policy.max_seed_bytes = v;
        }
        if let Some(v) = p.parallelism {
            c.policy.parallelism = v;
        }
        if let Some(v) = &p.interpreter {
            c.policy.interpreter = v.clone();
        }
        c.policy.entropy_file = p.entropy_file.clone().or_else(|| args.entropy_file.clone());
        out.push(c);
    }
    Ok((out, file.jobs.unwrap_or(args.jobs).max(1)))
}

fn run_all(configs: Vec<RunConfig>, jobs: usize) -> Vec<(PathBuf, Result<RunReport, OrchestratorError>)> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    thread::scope(|scope| {
        for _ in 0..jobs.min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = configs.get(i) else { break };
                let r = orchestrator::run(c);
                results.lock().expect("poisoned").push((i, c.workspace.clone(), r));
            });
        }
    });
    let mut results = results.into_inner().expect("poisoned");
    results.sort_by_key(|(i, _, _)| *i);
    results.into_iter().map(|(_, ws, r)| (ws, r)).collect()
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let (configs, jobs) = build_configs(args)?;
    // Fail fast on configuration problems before any session starts.
    for c in &configs {
        c.validate()?;
        c.gateway()?;
    }
    let mut code = 0;
    for (ws, result) in run_all(configs, jobs) {
        let report = result?;
        println!("Workspace: {}", ws.display());
        print!("{}", report.summary());
        code = code.max(report.exit_code());
    }
    Ok(ExitCode::from(code as u8))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report { workspace } => orchestrator::report(workspace).map(|s| {
            print!("{s}");
            ExitCode::SUCCESS
        }).map_err(Into::into),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<OrchestratorError>() {
                Some(OrchestratorError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
