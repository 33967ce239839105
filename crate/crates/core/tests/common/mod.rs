//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use sha2::{Digest, Sha256};

use seedforge_core::agent::FailureEvidence;
use seedforge_core::agent::FailureKind;
use seedforge_core::llm::{ChatMessage, ChatProvider, GatewayError, ProviderProfile, ProviderReply};
use seedforge_core::runtime::{
    GeneratorScript, InsertOutcome, ProduceStats, RuntimeError, ScriptRunner, SeedCorpus, ValidateError,
    MANIFEST_FILE,
};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Straightforward tree-walking evaluator for synthetic programs, written
/// against raw JSON so it shares nothing with the library interpreter.
pub struct Reference {
    functions: Vec<(String, Value)>,
    entry: String,
}

const DEPTH_CAP: usize = 64;
const STEP_CAP: u64 = 100_000;

impl Reference {
    pub fn new(program: &Value) -> Self {
        let entry = program.get("entry").and_then(Value::as_str).unwrap_or("LLVMFuzzerTestOneInput").to_owned();
        let functions = program["functions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| {
                let mut body = f["body"].clone();
                let mut next = 0;
                number_ifs(&mut body, &mut next);
                (f["name"].as_str().unwrap().to_owned(), body)
            })
            .collect();
        Self { functions, entry }
    }

    pub fn load(path: &Path) -> Self {
        Self::new(&serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap())
    }

    /// Every branch of every function as `(function, "k:T")`.
    pub fn all_branches(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for (name, body) in &self.functions {
            let mut n = 0;
            count_ifs(body, &mut n);
            for k in 0..n {
                out.insert((name.clone(), format!("{k}:T")));
                out.insert((name.clone(), format!("{k}:F")));
            }
        }
        out
    }

    /// Branches taken by one input.
    pub fn run(&self, data: &[u8]) -> BTreeSet<(String, String)> {
        self.trace(data).0
    }

    pub fn crashes(&self, data: &[u8]) -> bool {
        self.trace(data).1
    }

    /// Taken branches and whether the input crashed.
    pub fn trace(&self, data: &[u8]) -> (BTreeSet<(String, String)>, bool) {
        let mut hit = BTreeSet::new();
        let mut steps = 0;
        let crashed = self.call(&self.entry, data, 0, &mut hit, &mut steps).is_err();
        (hit, crashed)
    }

    fn body(&self, name: &str) -> &Value {
        &self.functions.iter().find(|(n, _)| n == name).unwrap().1
    }

    // Err(()) means the input crashed; control unwinds to the top.
    fn call(&self, name: &str, data: &[u8], depth: usize, hit: &mut Hits, steps: &mut u64) -> Result<(), ()> {
        if depth >= DEPTH_CAP {
            return Err(());
        }
        self.block(name, self.body(name), data, depth, hit, steps).map(|_| ())
    }

    // Ok(true) means a `return` was executed.
    fn block(&self, func: &str, stmts: &Value, data: &[u8], depth: usize, hit: &mut Hits, steps: &mut u64) -> Result<bool, ()> {
        for st in stmts.as_array().map(Vec::as_slice).unwrap_or_default() {
            *steps += 1;
            if *steps > STEP_CAP {
                return Err(());
            }
            match st["op"].as_str().unwrap() {
                "return" => return Ok(true),
                "crash" => return Err(()),
                "call" => self.call(st["callee"].as_str().unwrap(), data, depth + 1, hit, steps)?,
                "if" => {
                    let taken = eval(&st["cond"], data);
                    let id = st["_id"].as_u64().unwrap();
                    hit.insert((func.to_owned(), format!("{id}:{}", if taken { 'T' } else { 'F' })));
                    let arm = if taken { &st["then"] } else { &st["else"] };
                    if self.block(func, arm, data, depth, hit, steps)? {
                        return Ok(true);
                    }
                }
                other => panic!("unknown op {other}"),
            }
        }
        Ok(false)
    }
}

type Hits = BTreeSet<(String, String)>;

fn number_ifs(stmts: &mut Value, next: &mut u64) {
    let Some(list) = stmts.as_array_mut() else { return };
    for st in list {
        if st["op"] == "if" {
            st["_id"] = Value::from(*next);
            *next += 1;
            number_ifs(&mut st["then"], next);
            number_ifs(&mut st["else"], next);
        }
    }
}

fn count_ifs(stmts: &Value, n: &mut u64) {
    for st in stmts.as_array().map(Vec::as_slice).unwrap_or_default() {
        if st["op"] == "if" {
            *n += 1;
            count_ifs(&st["then"], n);
            count_ifs(&st["else"], n);
        }
    }
}

fn byte(data: &[u8], p: &Value) -> Option<u64> {
    data.get(p["at"].as_u64().unwrap() as usize).map(|b| *b as u64)
}

fn eval(p: &Value, data: &[u8]) -> bool {
    let len = data.len() as u64;
    match p["kind"].as_str().unwrap() {
        "len_ge" => len >= p["n"].as_u64().unwrap(),
        "len_eq" => len == p["n"].as_u64().unwrap(),
        "byte_eq" => byte(data, p) == p["value"].as_u64(),
        "byte_lt" => byte(data, p).is_some_and(|b| b < p["value"].as_u64().unwrap()),
        "byte_gt" => byte(data, p).is_some_and(|b| b > p["value"].as_u64().unwrap()),
        "byte_in" => byte(data, p).is_some_and(|b| b >= p["lo"].as_u64().unwrap() && b <= p["hi"].as_u64().unwrap()),
        "bytes_eq" => {
            let at = p["at"].as_u64().unwrap() as usize;
            let text = p["text"].as_str().unwrap().as_bytes();
            data.len() >= at + text.len() && &data[at..at + text.len()] == text
        }
        "and" => p["all"].as_array().unwrap().iter().all(|q| eval(q, data)),
        "or" => p["any"].as_array().unwrap().iter().any(|q| eval(q, data)),
        "not" => !eval(&p["pred"], data),
        other => panic!("unknown predicate {other}"),
    }
}

/// Seed files in a corpus directory.
pub fn corpus_files(dir: &Path) -> Vec<Vec<u8>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    paths.sort();
    paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// In-process runner whose behaviour is a pure function of the script text.
///
/// Scripts may steer it with marker lines:
/// `#fail: <stderr>` fails validation, `#empty` writes nothing,
/// `#runfail: <stderr>` validates but fails every batch invocation, and
/// `#seed: <text>` emits that text (suffixed with a counter for variety).
/// Anything else yields pseudo-random bytes derived from the source.
#[derive(Clone, Debug)]
pub struct FakeRunner {
    pub seeds_per_generator: usize,
    /// Replaces the `#fail:` text, for multi-line stderr.
    pub fail_stderr: Option<String>,
}

impl Default for FakeRunner {
    fn default() -> Self {
        Self { seeds_per_generator: 8, fail_stderr: None }
    }
}

fn marker<'a>(src: &'a str, tag: &str) -> Option<&'a str> {
    src.lines().find_map(|l| l.trim().strip_prefix(tag).map(str::trim))
}

impl ScriptRunner for FakeRunner {
    fn validate(&self, script: &GeneratorScript) -> Result<GeneratorScript, ValidateError> {
        if let Some(msg) = marker(&script.source, "#fail:") {
            let msg = self.fail_stderr.as_deref().unwrap_or(msg);
            return Err(ValidateError::ExecFailure(FailureEvidence::new(FailureKind::ExecFailure, msg, "", Some(1))));
        }
        if script.source.contains("#empty") {
            return Err(ValidateError::EmptyOutput(FailureEvidence::new(
                FailureKind::EmptyOutput,
                "",
                "",
                Some(0),
            )));
        }
        let mut ok = script.clone();
        ok.validated = true;
        Ok(ok)
    }

    fn produce(&self, script: &GeneratorScript, corpus: &mut SeedCorpus) -> Result<ProduceStats, RuntimeError> {
        let mut stats = ProduceStats { invocations: self.seeds_per_generator, ..Default::default() };
        if marker(&script.source, "#runfail:").is_some() {
            stats.failures = self.seeds_per_generator;
            return Ok(stats);
        }
        let prefixes: Vec<&str> = script.source.lines().filter_map(|l| l.trim().strip_prefix("#seed:")).map(str::trim).collect();
        for i in 0..self.seeds_per_generator {
            let bytes = if prefixes.is_empty() {
                digest(&[script.source.as_bytes(), &(i as u64).to_le_bytes()])[..8].to_vec()
            } else {
                let p = prefixes[i % prefixes.len()];
                format!("{p}{}", i / prefixes.len()).into_bytes()
            };
            stats.produced += 1;
            match corpus.insert(&bytes, script.version)? {
                InsertOutcome::Added(h) => {
                    stats.added += 1;
                    stats.added_hashes.push(h);
                }
                InsertOutcome::Duplicate(_) => stats.duplicates += 1,
            }
        }
        Ok(stats)
    }
}

/// Fenced python reply carrying the given body.
pub fn script_reply(body: &str) -> String {
    format!("Here is the generator.\n\n```python\n{body}\n```\n")
}

/// Provider sharing its queue with the test, so requests can be inspected
/// after the gateway takes ownership.
#[derive(Clone)]
pub struct Shared<P>(pub Arc<P>);

impl<P: ChatProvider> ChatProvider for Shared<P> {
    fn complete(&self, history: &[ChatMessage], profile: &ProviderProfile, timeout: Duration) -> Result<ProviderReply, GatewayError> {
        self.0.complete(history, profile, timeout)
    }
}

/// Records every request and answers from a closure.
pub struct FnProvider<F> {
    pub f: Mutex<F>,
    pub requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl<F> FnProvider<F>
where
    F: FnMut(usize, &[ChatMessage]) -> Result<ProviderReply, GatewayError> + Send,
{
    pub fn new(f: F) -> Self {
        Self { f: Mutex::new(f), requests: Mutex::default() }
    }

    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().unwrap().clone()
    }
}

impl<F> ChatProvider for FnProvider<F>
where
    F: FnMut(usize, &[ChatMessage]) -> Result<ProviderReply, GatewayError> + Send,
{
    fn complete(&self, history: &[ChatMessage], _: &ProviderProfile, _: Duration) -> Result<ProviderReply, GatewayError> {
        let mut reqs = self.requests.lock().unwrap();
        let n = reqs.len();
        reqs.push(history.to_vec());
        drop(reqs);
        (self.f.lock().unwrap())(n, history)
    }
}

/// One parsed line of `logs/run.jsonl`.
#[derive(Debug, Clone)]
pub struct Transition {
    pub from: String,
    pub to: String,
    pub event: String,
    pub dollars: f64,
    pub iteration: u64,
}

pub fn read_run_log(path: &Path) -> Vec<Transition> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            Transition {
                from: v["from"].as_str().unwrap().to_owned(),
                to: v["to"].as_str().unwrap().to_owned(),
                event: v["event"].as_str().unwrap().to_owned(),
                dollars: v["ledger"]["dollars"].as_f64().unwrap(),
                iteration: v["iteration"].as_u64().unwrap(),
            }
        })
        .collect()
}
