//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::{fixture, read_run_log, script_reply, FakeRunner, FnProvider, Reference, Shared};
use seedforge_core::agent::{Limits, ManualClock, Session, Workspace};
use seedforge_core::context::{prune_to_budget, select_partially_covered, CharRatioEstimator, ContextBudget};
use seedforge_core::coverage::{
    build_call_graph, classify, merge, total_branch_coverage, BranchRecord, CallEdge, CoverageReport, CoverageState,
    DynamicCallGraph, FunctionCoverage,
};
use seedforge_core::llm::{
    ApiKind, ChatMessage, CostLedger, Gateway, GatewayError, ProviderProfile, ProviderReply, RetryPolicy, Role, Usage,
};
use seedforge_core::orchestrator::{self, RunConfig};
use seedforge_core::prompts::{render, PromptKind};
use seedforge_core::runtime::{ExecutionPolicy, GeneratorScript, ScriptRunner, SubprocessRunner, ValidateError};
use seedforge_core::target::{SyntheticTarget, TargetSpec};
use seedforge_core::{AgentState, TerminationReason};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const ROOT: &str = "LLVMFuzzerTestOneInput";

fn random_graph(rng: &mut ChaCha8Rng) -> DynamicCallGraph {
    let n = rng.gen_range(1..60);
    let names: Vec<String> = (0..n).map(|i| if i == 0 { ROOT.to_owned() } else { format!("f{i}") }).collect();
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push(CallEdge::new(names[rng.gen_range(0..i)].as_str(), names[i].as_str()));
    }
    for _ in 0..rng.gen_range(0..n) {
        edges.push(CallEdge::new(names[rng.gen_range(0..n)].as_str(), names[rng.gen_range(0..n)].as_str()));
    }
    let functions = names.iter().map(|name| {
        let executed = rng.gen_bool(0.9);
        let k = rng.gen_range(0..5);
        let branches = (0..2 * k)
            .map(|b| BranchRecord::new(format!("{}:{}", b / 2, if b % 2 == 0 { 'T' } else { 'F' }), executed && rng.gen_bool(0.5)))
            .collect();
        let source: String = (0..rng.gen_range(1..120)).map(|l| format!("    x{l} = data[{l}];\n")).collect();
        FunctionCoverage::new(name.as_str(), "g.c", executed, branches, source).unwrap()
    });
    let report = CoverageReport::new(functions, edges, 1).unwrap();
    build_call_graph(&report, &ROOT.into()).unwrap()
}

fn pruning_bound() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let est = CharRatioEstimator::default();
    let mut pruned_cases = 0;
    for case in 0..1000 {
        let g = random_graph(&mut rng);
        let candidates = select_partially_covered(&g);
        let max_tokens = rng.gen_range(50..6000);
        let budget = ContextBudget::new(max_tokens, rng.gen_range(0..max_tokens)).unwrap();
        let avail = budget.available().unwrap();
        let slice = prune_to_budget(&candidates, &g, &budget, &est).map_err(|e| e.to_string())?;
        let sum: usize = slice.functions.iter().map(|e| e.estimated_tokens).sum();
        ensure!(slice.estimated_tokens == sum, "case {case}: slice total {} != entry sum {sum}", slice.estimated_tokens);
        ensure!(sum <= avail, "case {case}: {sum} tokens exceed the available {avail}");

        let depth = |id| g.node(id).unwrap().depth;
        let kept: BTreeSet<_> = slice.functions.iter().map(|e| e.function_id.clone()).collect();
        ensure!(kept.iter().all(|id| candidates.contains(id)), "case {case}: slice holds a non-candidate");
        if let Some(deepest_kept) = kept.iter().map(depth).max() {
            for c in &candidates {
                let d = depth(c);
                ensure!(d >= deepest_kept || kept.contains(c), "case {case}: {c} at depth {d} dropped while depth {deepest_kept} kept");
                ensure!(d <= deepest_kept || !kept.contains(c), "case {case}: {c} kept below the deepest kept level");
            }
        }
        let all = prune_to_budget(&candidates, &g, &ContextBudget::new(usize::MAX / 2, 0).unwrap(), &est).unwrap();
        if all.estimated_tokens <= avail {
            ensure!(slice == all, "case {case}: candidates fit but the slice was pruned");
        } else {
            pruned_cases += 1;
        }
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("1000 graphs, {pruned_cases} needed pruning, {took:.2?}"))
}

const UNIVERSE: usize = 5;

/// Reports over a fixed universe of functions. With `full`, every function is
/// present, as in a real target's export.
fn report_strategy(full: bool) -> impl Strategy<Value = CoverageReport> {
    let func = (any::<bool>(), any::<bool>(), any::<u8>(), prop::collection::vec(1u32..40, 4));
    (prop::collection::vec(func, UNIVERSE), any::<u32>(), 0u64..1000).prop_map(move |(fs, edge_bits, seeds)| {
        let mut present = Vec::new();
        let functions: Vec<FunctionCoverage> = fs
            .iter()
            .enumerate()
            .filter(|(_, f)| full || f.0)
            .map(|(i, &(_, executed, mask, ref lines))| {
                present.push(i);
                let branches = (0..i)
                    .map(|b| BranchRecord::new(format!("{b}:T"), executed && mask & (1 << b) != 0).at_line(lines[b % 4]))
                    .collect();
                FunctionCoverage::new(format!("fn{i}"), "m.c", executed, branches, format!("void fn{i}(void);")).unwrap()
            })
            .collect();
        let mut edges = Vec::new();
        for (k, &a) in present.iter().enumerate() {
            for (j, &b) in present.iter().enumerate() {
                if edge_bits & (1 << ((k * UNIVERSE + j) % 32)) != 0 {
                    edges.push(CallEdge::new(format!("fn{a}").as_str(), format!("fn{b}").as_str()));
                }
            }
        }
        CoverageReport::new(functions, edges, seeds).unwrap()
    })
}

fn merge_algebra() -> Outcome {
    let started = Instant::now();
    let cases = 10_000;
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    let m = |a: &CoverageReport, b: &CoverageReport| merge(a, b).map_err(|e| TestCaseError::fail(e.to_string()));
    let cov = |r: &CoverageReport| total_branch_coverage(r).ok();
    runner
        .run(&any::<bool>().prop_flat_map(|full| (report_strategy(full), report_strategy(full), report_strategy(full))), |(a, b, c)| {
            let ab = m(&a, &b)?;
            prop_assert_eq!(&ab, &m(&b, &a)?, "commutativity");
            let left = m(&ab, &c)?;
            let right = m(&a, &m(&b, &c)?)?;
            prop_assert_eq!(&left, &right, "associativity");
            let aa = m(&a, &a)?;
            prop_assert_eq!(&aa, &a.clone().with_seed_count(2 * a.seed_count()), "idempotence");
            prop_assert_eq!(ab.seed_count(), a.seed_count() + b.seed_count());
            for side in [&a, &b] {
                prop_assert!(ab.covered_branches() >= side.covered_branches());
                if let (Some(x), Some(y)) = (cov(side), cov(&ab)) {
                    if side.functions().len() == UNIVERSE {
                        prop_assert!(y >= x, "ratio fell from {} to {}", x, y);
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    Ok(format!("{cases} cases, {took:.2?}"))
}

fn classification() -> Outcome {
    let mut checked = 0;
    for n in 0..=8u32 {
        for executed in [false, true] {
            for mask in 0u32..(1 << n) {
                let covered: Vec<bool> = (0..n).map(|b| mask & (1 << b) != 0).collect();
                let branches = covered.iter().enumerate().map(|(i, c)| BranchRecord::new(format!("{i}:T"), *c)).collect();
                let fc = match FunctionCoverage::new("f", "f.c", executed, branches, "") {
                    Ok(f) => f,
                    Err(_) => {
                        ensure!(!executed && mask != 0, "valid record rejected: executed={executed} mask={mask:b}");
                        continue;
                    }
                };
                let expected = [
                    (CoverageState::NonCovered, !executed),
                    (CoverageState::FullyCovered, executed && covered.iter().all(|c| *c)),
                    (CoverageState::PartiallyCovered, executed && covered.iter().any(|c| !*c)),
                ];
                let holding: Vec<_> = expected.iter().filter(|(_, p)| *p).map(|(s, _)| *s).collect();
                ensure!(holding.len() == 1, "predicates overlap for executed={executed} mask={mask:b}");
                ensure!(classify(&fc) == holding[0], "executed={executed} mask={mask:b}: got {:?}", classify(&fc));
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} combinations up to 8 branches"))
}

fn garbage(rng: &mut ChaCha8Rng) -> Result<ProviderReply, GatewayError> {
    let words = ["import", "sys", "```", "```python", "#fail: boom", "#empty", "#runfail: x", "{", "}", "\n", "def", "print(1)", "é", "\u{0}"];
    let soup = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ");
    let content = match rng.gen_range(0..10) {
        0 => return Err(GatewayError::ProviderRefusal("no".into())),
        1 => return Err(GatewayError::Transport("reset".into())),
        2 if rng.gen_bool(0.2) => return Err(GatewayError::ContextOverflow { estimated: 1, window: 0 }),
        3 => String::from_utf8_lossy(&(0..rng.gen_range(0..400)).map(|_| rng.gen()).collect::<Vec<u8>>()).into_owned(),
        4 => format!("```python\n{}\n", soup(rng, 20)),
        5 => "```\n```".to_owned(),
        6 => "x".repeat(rng.gen_range(0..200_000)),
        _ => format!("{}\n```python\n{}\n```\n{}", soup(rng, 5), soup(rng, 30), soup(rng, 5)),
    };
    let usage = rng.gen_bool(0.5).then(|| Usage { prompt_tokens: rng.gen_range(0..5000), completion_tokens: rng.gen_range(0..500) });
    Ok(ProviderReply { content, usage })
}

/// Replays the log and checks no site was realigned more than `max` times
/// between successes.
fn check_retry_bound(log: &Path, max: u32) -> Result<u32, String> {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    let mut site = String::new();
    let mut peak = 0;
    for t in read_run_log(log) {
        if t.to == "Realign" {
            site = t.from.clone();
        }
        match (t.from.as_str(), t.event.as_str()) {
            ("Realign", "Reply" | "Refused") => {
                let c = counts.entry(site.clone()).or_insert(0);
                *c += 1;
                peak = peak.max(*c);
                ensure!(*c <= max, "{site} realigned {c} times");
            }
            (_, "ScriptExtracted") => {
                counts.remove("ValidateScript");
            }
            (_, "SeedsProduced") => {
                counts.remove("RunGenerator");
            }
            _ => {}
        }
    }
    Ok(peak)
}

fn liveness() -> Outcome {
    let started = Instant::now();
    let target = SyntheticTarget::load(&fixture("three_level.json")).map_err(|e| e.to_string())?;
    let runner = FakeRunner { seeds_per_generator: 4, ..FakeRunner::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut by_state: BTreeMap<String, usize> = BTreeMap::new();
    let mut slowest = Duration::ZERO;
    let mut peak = 0;
    for i in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let limits = Limits {
            max_realign: 3,
            max_iterations: rng.gen_range(1..=6),
            wall_limit: Duration::from_secs(1800),
            stop_on_convergence: rng.gen_bool(0.3),
        };
        let window = [4_000, 32_000, 128_000][rng.gen_range(0..3)];
        let mut provider_rng = ChaCha8Rng::seed_from_u64(i ^ 0xdead);
        let provider = FnProvider::new(move |_, _: &[ChatMessage]| garbage(&mut provider_rng));
        let gw = Gateway::new(Box::new(provider), ProviderProfile::scripted(window))
            .with_retry(RetryPolicy { max_attempts: 2, initial_backoff: Duration::ZERO });
        let clock = ManualClock::default();
        let ws = Workspace::at(dir.path().join(format!("s{i}")));
        let t0 = Instant::now();
        let out = Session::new(&gw, &runner, &target, &clock, ws.clone())
            .with_limits(limits)
            .run()
            .map_err(|e| format!("session {i}: {e}"))?;
        let took = t0.elapsed();
        slowest = slowest.max(took);
        ensure!(took < Duration::from_secs(10), "session {i} took {took:?}");
        ensure!(out.state.state.is_terminal(), "session {i} ended in {}", out.state.state);
        peak = peak.max(check_retry_bound(&ws.run_log_path(), limits.max_realign).map_err(|e| format!("session {i}: {e}"))?);
        *by_state.entry(format!("{:?}", out.state.termination.unwrap())).or_default() += 1;
        std::fs::remove_dir_all(ws.root()).ok();
    }
    Ok(format!(
        "500 sessions, slowest {slowest:.2?}, peak realigns {peak}, total {:.1?}, endings {by_state:?}",
        started.elapsed()
    ))
}

fn budget_semantics() -> Outcome {
    let target = SyntheticTarget::load(&fixture("three_level.json")).map_err(|e| e.to_string())?;
    let runner = FakeRunner::default();
    let clock = ManualClock::default();
    let dir = tempfile::tempdir().unwrap();
    let profile = ProviderProfile {
        model: "priced".into(),
        api: ApiKind::Scripted,
        context_window_tokens: 128_000,
        prompt_price_per_million: 1.0,
        completion_price_per_million: 0.0,
        base_url: None,
        temperature: None,
        max_output_tokens: 1024,
    };
    // $0.125 x 4 lands exactly on the limit, which is not an exceedance.
    // The seventh call pushes the total to $0.51 while an iteration is open.
    let costs = [125_000u64, 125_000, 125_000, 125_000, 0, 0, 10_000, 0, 0, 0];
    let provider = std::sync::Arc::new(FnProvider::new(move |n, history: &[ChatMessage]| {
        let last = &history.last().unwrap().content;
        let content = if last.contains("Write a short analysis of the current generator") {
            "Vary the first byte.".to_owned()
        } else {
            script_reply(&format!("#seed: v{n}-"))
        };
        Ok(ProviderReply { content, usage: Some(Usage { prompt_tokens: costs[n.min(costs.len() - 1)], completion_tokens: 0 }) })
    }));
    let gw = Gateway::new(Box::new(Shared(provider.clone())), profile);
    let ws = Workspace::at(dir.path().join("ws"));
    let out = Session::new(&gw, &runner, &target, &clock, ws.clone())
        .with_ledger(CostLedger::new(0.5))
        .run()
        .map_err(|e| e.to_string())?;
    let s = &out.state;
    let calls = provider.requests().len();
    ensure!(s.termination == Some(TerminationReason::Budget), "terminated with {:?}", s.termination);
    ensure!(s.state == AgentState::Done, "final state {}", s.state);
    ensure!(calls == 7, "expected 7 provider calls, saw {calls}");
    ensure!((s.ledger.dollars - 0.51).abs() < 1e-9, "ledger at {}", s.ledger.dollars);
    let last = s.iterations.last().ok_or("no iterations recorded")?;
    ensure!(s.iterations.len() == 4, "expected 4 iterations, saw {}", s.iterations.len());
    ensure!(last.version == 4 && (last.dollars - 0.51).abs() < 1e-9, "last iteration {last:?}");
    let at_limit = &s.iterations[2];
    ensure!((at_limit.dollars - 0.5).abs() < 1e-12, "third iteration ended at {}", at_limit.dollars);
    // Spending only ever stops a session from Summarize.
    for t in read_run_log(&ws.run_log_path()) {
        if t.to == "Done" || t.to == "Aborted" {
            ensure!(t.from == "Summarize", "stopped from {}", t.from);
        }
        if t.dollars > 0.5 {
            ensure!(t.iteration >= 3, "over the limit during iteration {}", t.iteration);
        }
    }
    Ok(format!("continued at $0.50, crossed to $0.51 mid-iteration, stopped after iteration {} with {calls} calls", last.iteration))
}

fn generator_timeout() -> Outcome {
    let policy = ExecutionPolicy::default();
    ensure!(policy.invocation_timeout() == Duration::from_secs(30), "default timeout is {:?}", policy.invocation_timeout());
    let script = GeneratorScript::new("import sys\nwhile True:\n    pass\n", 1);
    let started = Instant::now();
    let result = SubprocessRunner::new(policy).validate(&script);
    let took = started.elapsed();
    match result {
        Err(ValidateError::Timeout(ev)) => {
            ensure!(ev.timed_out, "evidence not marked as timed out");
            ensure!(took < Duration::from_secs(32), "killed after {took:?}");
            ensure!(took >= Duration::from_secs(29), "killed too early, after {took:?}");
            Ok(format!("killed and reported as Timeout after {took:.2?}"))
        }
        other => Err(format!("expected Timeout, got {other:?} after {took:?}")),
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root).sort_by_file_name() {
        let e = e.unwrap();
        if !e.file_type().is_file() {
            continue;
        }
        let rel = e.path().strip_prefix(root).unwrap().display().to_string();
        let mut bytes = std::fs::read(e.path()).unwrap();
        if rel == "report.json" {
            let mut v: Value = serde_json::from_slice(&bytes).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_secs");
            bytes = serde_json::to_vec(&v).unwrap();
        }
        out.insert(rel, bytes);
    }
    out
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let reference = Reference::load(&fixture("three_level.json"));
    let mut snapshots = Vec::new();
    let mut summary = String::new();
    for run in 0..2 {
        let ws = dir.path().join(format!("run{run}"));
        let mut cfg = RunConfig::new(TargetSpec::synthetic(fixture("three_level.json")), &ws);
        cfg.replay = Some(fixture("three_level_replay.json"));
        cfg.policy.seeds_per_generator = 30;
        cfg.policy.entropy_file = Some(fixture("entropy.bin"));
        let report = orchestrator::run(&cfg).map_err(|e| e.to_string())?;
        ensure!(report.termination == TerminationReason::ReplayExhausted, "run {run} ended with {}", report.termination);
        ensure!(report.exit_code() == 0, "run {run} exit code {}", report.exit_code());

        let corpus = common::corpus_files(&ws.join("corpus"));
        let universe = reference.all_branches();
        let hit: BTreeSet<_> = corpus.iter().flat_map(|s| reference.run(s)).collect();
        let expected = hit.len() as f64 / universe.len() as f64;
        ensure!(universe.len() == 14 && report.total_branches == 14, "branch universe {} / {}", universe.len(), report.total_branches);
        ensure!(report.covered_branches == hit.len(), "covered {} but the reference says {}", report.covered_branches, hit.len());
        ensure!((report.coverage - expected).abs() < 1e-12, "ratio {} vs reference {expected}", report.coverage);
        let crashing = corpus.iter().filter(|s| reference.crashes(s)).count();
        ensure!(report.crashes == crashing, "{} crashes recorded, reference finds {crashing}", report.crashes);

        let ratios: Vec<f64> = report.iterations.iter().map(|i| i.coverage).collect();
        ensure!(ratios.windows(2).all(|w| w[1] >= w[0]), "coverage not monotone: {ratios:?}");
        ensure!(ratios.len() == 3 && ratios[2] > ratios[0], "no progression: {ratios:?}");
        summary = format!("coverage {:?} = reference {:.4}, {} seeds, {} crashes", ratios, expected, corpus.len(), crashing);
        snapshots.push(snapshot(&ws));
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    ensure!(a.keys().eq(b.keys()), "workspaces list different files");
    if let Some(k) = a.keys().find(|k| a[*k] != b[*k]) {
        return Err(format!("workspaces differ at {k}"));
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("{summary}; {} identical files; {took:.2?}", a.len()))
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

/// Checks that `rendered` is the golden text with each `{slot}` replaced by its value.
fn differs_only_at_slots(golden: &str, rendered: &str, slots: &[(&str, &str)]) -> Result<(), String> {
    let mut expected = golden.to_owned();
    for (slot, value) in slots {
        let marker = format!("{{{slot}}}");
        ensure!(expected.matches(&marker).count() == 1, "golden text lacks a single {marker}");
        expected = expected.replace(&marker, value);
    }
    if expected == rendered {
        return Ok(());
    }
    let at = expected.bytes().zip(rendered.bytes()).take_while(|(a, b)| a == b).count();
    Err(format!("first difference at byte {at}: {:?}", &rendered[at.min(rendered.len())..(at + 40).min(rendered.len())]))
}

fn prompt_fidelity() -> Outcome {
    let harness = "int LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) { return {0}; }";
    let report = "## Coverage {braces} stay literal";
    let cases: [(PromptKind, &str, Vec<(&str, &str)>); 4] = [
        (PromptKind::SystemPrompt, "system.txt", vec![]),
        (PromptKind::UserPrompt, "user.txt", vec![("harness_code", harness)]),
        (PromptKind::ExampleScriptPrompt, "example_script.txt", vec![]),
        (PromptKind::SummaryPrompt, "summary.txt", vec![("coverage_report", report)]),
    ];
    for (kind, file, slots) in &cases {
        let rendered = render(*kind, slots.iter().copied()).map_err(|e| e.to_string())?;
        differs_only_at_slots(&golden(file), &rendered, slots).map_err(|e| format!("{kind}: {e}"))?;
    }

    // The opening messages of a live session use the same texts.
    let target = SyntheticTarget::load(&fixture("three_level.json")).map_err(|e| e.to_string())?;
    let provider = std::sync::Arc::new(FnProvider::new(|_, _: &[ChatMessage]| Err(GatewayError::ReplayExhausted)));
    let gw = Gateway::new(Box::new(Shared(provider.clone())), ProviderProfile::scripted(128_000));
    let dir = tempfile::tempdir().unwrap();
    Session::new(&gw, &FakeRunner::default(), &target, &ManualClock::default(), Workspace::at(dir.path()))
        .run()
        .map_err(|e| e.to_string())?;
    let first = provider.requests().into_iter().next().ok_or("no request sent")?;
    ensure!(first.len() == 3, "opening request has {} messages", first.len());
    ensure!(first[0].role == Role::System && first[0].content == golden("system.txt"), "system message differs");
    let user = &first[1].content;
    let harness_start = golden("user.txt").find("{harness_code}").unwrap();
    ensure!(first[1].role == Role::User && user.starts_with(&golden("user.txt")[..harness_start]), "user message differs");
    ensure!(user.contains("parse_word"), "harness listing missing from the user message");
    ensure!(first[2].content == golden("example_script.txt"), "example script message differs");
    Ok("4 templates match the stored texts outside slots; session opening verified".to_owned())
}

fn realign_fidelity() -> Outcome {
    let stderr = "Traceback (most recent call last):\n  File \"generator.py\", line 7, in <module>\n    hdr = struct.pack('>I', -1)\nstruct.error: argument out of range {size}";
    let target = SyntheticTarget::load(&fixture("three_level.json")).map_err(|e| e.to_string())?;
    let broken = script_reply("import struct\n#fail: see runner");
    let replies = [broken, script_reply("#seed: ok"), "Analysis.".to_owned()];
    let provider = std::sync::Arc::new(FnProvider::new(move |n, _: &[ChatMessage]| match replies.get(n) {
        Some(r) => Ok(ProviderReply { content: r.clone(), usage: None }),
        None => Err(GatewayError::ReplayExhausted),
    }));
    let gw = Gateway::new(Box::new(Shared(provider.clone())), ProviderProfile::scripted(128_000));
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::at(dir.path());
    let runner = FakeRunner { fail_stderr: Some(stderr.to_owned()), ..FakeRunner::default() };
    Session::new(&gw, &runner, &target, &ManualClock::default(), ws.clone()).run().map_err(|e| e.to_string())?;

    let requests = provider.requests();
    ensure!(requests.len() >= 2, "no realignment request was sent");
    let realign = &requests[1].last().unwrap().content;
    ensure!(realign.contains(stderr), "stderr not carried verbatim:\n{realign}");
    let log = read_run_log(&ws.run_log_path());
    let path: Vec<String> = log.iter().map(|t| t.to.clone()).collect();
    let expect = ["AwaitInitialScript", "ValidateScript", "RunGenerator", "Realign", "ValidateScript", "RunGenerator", "CollectCoverage"];
    ensure!(path.starts_with(&expect.map(String::from)), "transitions {path:?}");
    Ok("stderr quoted verbatim; Realign -> ValidateScript -> RunGenerator".to_owned())
}

fn on_path(tool: &str) -> bool {
    std::env::var_os("PATH").is_some_and(|p| std::env::split_paths(&p).any(|d| d.join(tool).is_file()))
}

/// `Err` carries the reason the check cannot run here.
fn live_smoke() -> Result<Outcome, String> {
    let key = ["OPENAI_API_KEY", "ANTHROPIC_API_KEY"].iter().any(|k| std::env::var(k).is_ok_and(|v| !v.is_empty()));
    if !key {
        return Err("no API key in the environment".into());
    }
    let missing: Vec<&str> = ["clang", "llvm-profdata", "llvm-cov"].into_iter().filter(|t| !on_path(t)).collect();
    if !missing.is_empty() {
        return Err(format!("API key present but {} not on PATH", missing.join(", ")));
    }
    Ok((|| {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        std::fs::write(
            src.join("fuzz.c"),
            "#include <stdint.h>\n#include <stddef.h>\nint LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) {\n  if (n > 2 && d[0] == 'O' && d[1] == 'K') return 1;\n  return 0;\n}\n",
        )
        .unwrap();
        let build = "clang -g -fsanitize=fuzzer -fprofile-instr-generate -fcoverage-mapping fuzz.c -o fuzz";
        let mut cfg = RunConfig::new(TargetSpec::toolchain(&src, build, "fuzz"), dir.path().join("ws"));
        if std::env::var("OPENAI_API_KEY").is_err() {
            cfg.model = "claude-3-5-haiku-20241022".into();
        }
        cfg.soft_limit_dollars = 0.05;
        cfg.max_iterations = 2;
        cfg.wall_limit = Duration::from_secs(600);
        cfg.policy.seeds_per_generator = 20;
        let report = orchestrator::run(&cfg).map_err(|e| e.to_string())?;
        ensure!(report.ledger.dollars < 0.10, "spent ${:.4}", report.ledger.dollars);
        ensure!(report.generator_count >= 1, "no validated generator ({}: {:?})", report.termination, report.detail);
        Ok(format!("{} generators for ${:.4}", report.generator_count, report.ledger.dollars))
    })())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("pruning bound", pruning_bound),
        ("coverage-merge algebra", merge_algebra),
        ("classification partition", classification),
        ("state-machine liveness", liveness),
        ("budget semantics", budget_semantics),
        ("generator timeout", generator_timeout),
        ("end-to-end oracle run", end_to_end),
        ("prompt fidelity", prompt_fidelity),
        ("realignment fidelity", realign_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !selected(name) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    if selected("live-provider smoke") {
        match live_smoke() {
            Err(why) => println!("SKIP  10. live-provider smoke: {why}"),
            Ok(Ok(d)) => println!("PASS  10. live-provider smoke: {d}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("FAIL  10. live-provider smoke: {e}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
