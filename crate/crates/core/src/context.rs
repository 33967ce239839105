//! Feedback context assembly under a token budget.
//!
//! Only partially covered functions are offered to the model. When their
//! sources still overflow the window, whole depth levels are removed starting
//! from the deepest one; within the last remaining level the largest functions
//! are dropped and, as a last resort, a single function's source is truncated.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::coverage::{
    total_branch_coverage, CoverageReport, CoverageState, DynamicCallGraph, FunctionId,
};
use crate::runtime::GeneratorScript;

pub const NO_PARTIAL_FUNCTIONS: &str =
    "No partially covered functions remain in the explored call graph.";

const TRUNCATION_MARKER: &str = "... [source truncated to fit the context window]";

/// Token counting strategy used before anything is sent to a provider.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / chars_per_token)`.
#[derive(Clone, Copy, Debug)]
pub struct CharRatioEstimator {
    pub chars_per_token: usize,
}

impl Default for CharRatioEstimator {
    fn default() -> Self {
        Self { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token.max(1))
    }
}

/// Default heuristic estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    CharRatioEstimator::default().estimate(text)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("context budget leaves no room: max_tokens={max_tokens}, reserved_tokens={reserved_tokens}")]
    EmptyBudget { max_tokens: usize, reserved_tokens: usize },
    #[error("candidate `{0}` is not a node of the call graph")]
    UnknownCandidate(FunctionId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ContextBudget {
    pub max_tokens: usize,
    pub reserved_tokens: usize,
}

impl ContextBudget {
    pub fn new(max_tokens: usize, reserved_tokens: usize) -> Result<Self, ContextError> {
        let b = Self { max_tokens, reserved_tokens };
        b.available()?;
        Ok(b)
    }

    /// Tokens left for function context.
    pub fn available(&self) -> Result<usize, ContextError> {
        match self.max_tokens.checked_sub(self.reserved_tokens) {
            Some(n) if n > 0 => Ok(n),
            _ => Err(ContextError::EmptyBudget {
                max_tokens: self.max_tokens,
                reserved_tokens: self.reserved_tokens,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SliceEntry {
    pub function_id: FunctionId,
    pub file: String,
    pub depth: u32,
    pub source_text: String,
    /// Uncovered branch labels, e.g. `3:F (line 12)`.
    pub uncovered: Vec<String>,
    pub truncated: bool,
    pub estimated_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ContextSlice {
    pub functions: Vec<SliceEntry>,
    pub estimated_tokens: usize,
    pub pruned_levels: usize,
    /// Functions dropped from the shallowest remaining level.
    pub dropped_in_level: Vec<FunctionId>,
}

impl ContextSlice {
    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn contains(&self, id: &FunctionId) -> bool {
        self.functions.iter().any(|e| &e.function_id == id)
    }
}

/// Partially covered nodes ordered by depth, then name.
pub fn select_partially_covered(g: &DynamicCallGraph) -> Vec<FunctionId> {
    let mut out: Vec<(u32, &FunctionId)> = g
        .nodes()
        .iter()
        .filter(|(_, n)| n.state == CoverageState::PartiallyCovered)
        .map(|(id, n)| (n.depth, id))
        .collect();
    out.sort();
    out.into_iter().map(|(_, id)| id.clone()).collect()
}

fn render_entry(e: &SliceEntry) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "### {} ({}, call depth {})", e.function_id, e.file, e.depth);
    if e.uncovered.is_empty() {
        s.push_str("Uncovered branches: none recorded\n");
    } else {
        let _ = writeln!(s, "Uncovered branches: {}", e.uncovered.join(", "));
    }
    s.push_str("```\n");
    if e.source_text.is_empty() && !e.truncated {
        s.push_str("(source unavailable)\n");
    } else {
        s.push_str(&e.source_text);
        if !e.source_text.ends_with('\n') && !e.source_text.is_empty() {
            s.push('\n');
        }
        if e.truncated {
            s.push_str(TRUNCATION_MARKER);
            s.push('\n');
        }
    }
    s.push_str("```\n");
    s
}

fn make_entry(
    g: &DynamicCallGraph,
    id: &FunctionId,
    est: &dyn TokenEstimator,
) -> Result<SliceEntry, ContextError> {
    let node = g.node(id).ok_or_else(|| ContextError::UnknownCandidate(id.clone()))?;
    let uncovered = node
        .coverage
        .uncovered()
        .map(|b| match b.line {
            Some(line) => format!("{} (line {line})", b.id),
            None => b.id.clone(),
        })
        .collect();
    let mut entry = SliceEntry {
        function_id: id.clone(),
        file: node.coverage.file().to_owned(),
        depth: node.depth,
        source_text: node.coverage.source_text().to_owned(),
        uncovered,
        truncated: false,
        estimated_tokens: 0,
    };
    entry.estimated_tokens = est.estimate(&render_entry(&entry));
    Ok(entry)
}

/// Longest source prefix whose rendered entry fits `avail`, or `None` when
/// even an empty snippet does not fit.
fn truncate_to_fit(entry: &SliceEntry, avail: usize, est: &dyn TokenEstimator) -> Option<SliceEntry> {
    let chars: Vec<char> = entry.source_text.chars().collect();
    let build = |k: usize| {
        let mut e = entry.clone();
        e.source_text = chars[..k].iter().collect();
        e.truncated = true;
        e.estimated_tokens = est.estimate(&render_entry(&e));
        e
    };
    let empty = build(0);
    if empty.estimated_tokens > avail {
        return None;
    }
    let (mut lo, mut hi) = (0usize, chars.len());
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if build(mid).estimated_tokens <= avail {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(build(lo))
}

/// Fit the candidate functions into the budget, pruning deepest levels first.
pub fn prune_to_budget(
    candidates: &[FunctionId],
    g: &DynamicCallGraph,
    budget: &ContextBudget,
    est: &dyn TokenEstimator,
) -> Result<ContextSlice, ContextError> {
    let avail = budget.available()?;
    let mut entries = candidates
        .iter()
        .map(|id| make_entry(g, id, est))
        .collect::<Result<Vec<_>, _>>()?;
    let total = |es: &[SliceEntry]| es.iter().map(|e| e.estimated_tokens).sum::<usize>();

    let mut pruned_levels = 0;
    loop {
        let depths: BTreeSet<u32> = entries.iter().map(|e| e.depth).collect();
        if total(&entries) <= avail || depths.len() <= 1 {
            break;
        }
        let deepest = *depths.iter().next_back().expect("non-empty");
        entries.retain(|e| e.depth != deepest);
        pruned_levels += 1;
    }

    let mut dropped_in_level = Vec::new();
    while total(&entries) > avail && entries.len() > 1 {
        // Largest estimate goes first; ties drop the later candidate.
        let (idx, _) = entries
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.estimated_tokens.cmp(&b.estimated_tokens).then(ia.cmp(ib)))
            .expect("non-empty");
        dropped_in_level.push(entries.remove(idx).function_id);
    }

    if total(&entries) > avail {
        let only = entries.pop().expect("single entry remains");
        match truncate_to_fit(&only, avail, est) {
            Some(e) => entries.push(e),
            None => dropped_in_level.push(only.function_id),
        }
    }

    Ok(ContextSlice { estimated_tokens: total(&entries), functions: entries, pruned_levels, dropped_in_level })
}

/// One-paragraph summary of overall branch coverage.
pub fn coverage_summary(report: &CoverageReport) -> String {
    let (mut full, mut partial, mut none) = (0, 0, 0);
    for f in report.functions().values() {
        match f.state() {
            CoverageState::FullyCovered => full += 1,
            CoverageState::PartiallyCovered => partial += 1,
            CoverageState::NonCovered => none += 1,
        }
    }
    let pct = total_branch_coverage(report).map(|r| r * 100.0).unwrap_or(0.0);
    format!(
        "Branch coverage: {}/{} ({pct:.2}%) across {} functions; {full} fully covered, {partial} partially covered, {none} not covered.",
        report.covered_branches(),
        report.total_branches(),
        report.functions().len(),
    )
}

/// Text that fills the `{coverage_report}` slot of the summary prompt.
pub fn render_feedback_context(
    slice: &ContextSlice,
    latest: &GeneratorScript,
    coverage_summary: &str,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Coverage feedback for generator version {}", latest.version);
    if slice.is_empty() {
        s.push_str(NO_PARTIAL_FUNCTIONS);
        s.push('\n');
    } else {
        s.push_str(
            "The functions below are only partially covered by the test cases generated so far. \
             Branches listed as uncovered have never been taken.\n\n",
        );
        for e in &slice.functions {
            s.push_str(&render_entry(e));
            s.push('\n');
        }
    }
    if slice.pruned_levels > 0 {
        let _ = writeln!(
            s,
            "Note: {} deeper call-graph level(s) were omitted to fit the context window.",
            slice.pruned_levels
        );
    }
    if !slice.dropped_in_level.is_empty() {
        let _ = writeln!(
            s,
            "Note: {} more partially covered function(s) were omitted to fit the context window.",
            slice.dropped_in_level.len()
        );
    }
    s.push_str("\n## Overall coverage\n");
    s.push_str(coverage_summary);
    s.push('\n');
    s
}
