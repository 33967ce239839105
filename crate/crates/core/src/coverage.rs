//! Branch coverage over a dynamic call graph.
//!
//! A [`CoverageReport`] is the mergeable unit of feedback: per-function branch
//! records plus the call edges observed while running a batch of seeds. Reports
//! from successive generators are folded together with [`merge`] and projected
//! onto a [`DynamicCallGraph`] rooted at the harness entry function.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Qualified name of a function in the target.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(String);

impl FunctionId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for FunctionId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// One arm of a conditional. `id` is stable within its function for a given
/// build of the target (ordinal within the export plus the arm).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub id: String,
    pub covered: bool,
    /// Source line of the branch, when the producer knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
}

impl BranchRecord {
    pub fn new(id: impl Into<String>, covered: bool) -> Self {
        Self { id: id.into(), covered, line: None }
    }

    pub fn at_line(mut self, line: u32) -> Self {
        self.line = Some(line);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunctionCoverage {
    id: FunctionId,
    file: String,
    executed: bool,
    branches: Vec<BranchRecord>,
    source_text: String,
}

impl FunctionCoverage {
    pub fn new(
        id: impl Into<FunctionId>,
        file: impl Into<String>,
        executed: bool,
        branches: Vec<BranchRecord>,
        source_text: impl Into<String>,
    ) -> Result<Self, CoverageError> {
        let id = id.into();
        let mut seen = BTreeSet::new();
        for b in &branches {
            if !seen.insert(b.id.as_str()) {
                return Err(CoverageError::DuplicateBranch { function: id, branch: b.id.clone() });
            }
        }
        if !executed && branches.iter().any(|b| b.covered) {
            return Err(CoverageError::CoveredBranchInUnexecutedFunction(id));
        }
        Ok(Self { id, file: file.into(), executed, branches, source_text: source_text.into() })
    }

    pub fn id(&self) -> &FunctionId {
        &self.id
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    pub fn executed(&self) -> bool {
        self.executed
    }

    pub fn branches(&self) -> &[BranchRecord] {
        &self.branches
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn set_source_text(&mut self, text: impl Into<String>) {
        self.source_text = text.into();
    }

    pub fn covered_count(&self) -> usize {
        self.branches.iter().filter(|b| b.covered).count()
    }

    pub fn uncovered(&self) -> impl Iterator<Item = &BranchRecord> {
        self.branches.iter().filter(|b| !b.covered)
    }

    pub fn state(&self) -> CoverageState {
        classify(self)
    }

    fn merge(&self, other: &Self) -> Result<Self, CoverageError> {
        let same_ids = self.file == other.file
            && self.branches.len() == other.branches.len()
            && self.branches.iter().zip(&other.branches).all(|(a, b)| a.id == b.id);
        if !same_ids {
            return Err(CoverageError::ConflictingBranchSets(self.id.clone()));
        }
        let branches = self
            .branches
            .iter()
            .zip(&other.branches)
            .map(|(a, b)| BranchRecord {
                id: a.id.clone(),
                covered: a.covered || b.covered,
                line: match (a.line, b.line) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, y) => x.or(y),
                },
            })
            .collect();
        // Prefer the richer snippet; ties break on content so merge stays commutative.
        let source_text = match self.source_text.len().cmp(&other.source_text.len()) {
            std::cmp::Ordering::Greater => self.source_text.clone(),
            std::cmp::Ordering::Less => other.source_text.clone(),
            std::cmp::Ordering::Equal => self.source_text.clone().max(other.source_text.clone()),
        };
        Ok(Self {
            id: self.id.clone(),
            file: self.file.clone(),
            executed: self.executed || other.executed,
            branches,
            source_text,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoverageState {
    FullyCovered,
    PartiallyCovered,
    NonCovered,
}

impl fmt::Display for CoverageState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoverageState::FullyCovered => "fully covered",
            CoverageState::PartiallyCovered => "partially covered",
            CoverageState::NonCovered => "not covered",
        })
    }
}

/// A directed call edge `(caller, callee)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallEdge(pub FunctionId, pub FunctionId);

impl CallEdge {
    pub fn new(caller: impl Into<FunctionId>, callee: impl Into<FunctionId>) -> Self {
        Self(caller.into(), callee.into())
    }

    pub fn caller(&self) -> &FunctionId {
        &self.0
    }

    pub fn callee(&self) -> &FunctionId {
        &self.1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    functions: BTreeMap<FunctionId, FunctionCoverage>,
    call_edges: BTreeSet<CallEdge>,
    seed_count: u64,
}

impl CoverageReport {
    pub fn new(
        functions: impl IntoIterator<Item = FunctionCoverage>,
        call_edges: impl IntoIterator<Item = CallEdge>,
        seed_count: u64,
    ) -> Result<Self, CoverageError> {
        let mut map = BTreeMap::new();
        for f in functions {
            if let Some(prev) = map.insert(f.id.clone(), f) {
                return Err(CoverageError::DuplicateFunction(prev.id));
            }
        }
        let call_edges: BTreeSet<CallEdge> = call_edges.into_iter().collect();
        for e in &call_edges {
            if !map.contains_key(&e.0) || !map.contains_key(&e.1) {
                return Err(CoverageError::DanglingEdge { caller: e.0.clone(), callee: e.1.clone() });
            }
        }
        Ok(Self { functions: map, call_edges, seed_count })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn functions(&self) -> &BTreeMap<FunctionId, FunctionCoverage> {
        &self.functions
    }

    pub fn function(&self, id: &FunctionId) -> Option<&FunctionCoverage> {
        self.functions.get(id)
    }

    pub fn call_edges(&self) -> &BTreeSet<CallEdge> {
        &self.call_edges
    }

    pub fn seed_count(&self) -> u64 {
        self.seed_count
    }

    pub fn with_seed_count(mut self, seed_count: u64) -> Self {
        self.seed_count = seed_count;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn total_branches(&self) -> usize {
        self.functions.values().map(|f| f.branches.len()).sum()
    }

    pub fn covered_branches(&self) -> usize {
        self.functions.values().map(FunctionCoverage::covered_count).sum()
    }

    /// Attach source snippets to functions that have none.
    pub fn fill_sources<F>(&mut self, mut lookup: F)
    where
        F: FnMut(&FunctionCoverage) -> Option<String>,
    {
        for f in self.functions.values_mut() {
            if f.source_text.is_empty() {
                if let Some(text) = lookup(f) {
                    f.source_text = text;
                }
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoverageError {
    #[error("function `{0}` carries different branch sets in the merged reports")]
    ConflictingBranchSets(FunctionId),
    #[error("branch `{branch}` appears twice in function `{function}`")]
    DuplicateBranch { function: FunctionId, branch: String },
    #[error("function `{0}` is not executed but has covered branches")]
    CoveredBranchInUnexecutedFunction(FunctionId),
    #[error("function `{0}` appears twice in the report")]
    DuplicateFunction(FunctionId),
    #[error("call edge {caller} -> {callee} references a function missing from the report")]
    DanglingEdge { caller: FunctionId, callee: FunctionId },
    #[error("entry function `{0}` is not present in the coverage report")]
    RootUnknown(FunctionId),
    #[error("the report contains no branches")]
    NoBranches,
}

/// Union of two reports. A branch is covered if either side covered it.
pub fn merge(a: &CoverageReport, b: &CoverageReport) -> Result<CoverageReport, CoverageError> {
    let mut functions = a.functions.clone();
    for (id, fb) in &b.functions {
        match functions.get_mut(id) {
            Some(fa) => *fa = fa.merge(fb)?,
            None => {
                functions.insert(id.clone(), fb.clone());
            }
        }
    }
    Ok(CoverageReport {
        functions,
        call_edges: a.call_edges.union(&b.call_edges).cloned().collect(),
        seed_count: a.seed_count + b.seed_count,
    })
}

pub fn classify(fc: &FunctionCoverage) -> CoverageState {
    if !fc.executed {
        CoverageState::NonCovered
    } else if fc.branches.iter().all(|b| b.covered) {
        CoverageState::FullyCovered
    } else {
        CoverageState::PartiallyCovered
    }
}

pub fn total_branch_coverage(report: &CoverageReport) -> Result<f64, CoverageError> {
    let total = report.total_branches();
    if total == 0 {
        return Err(CoverageError::NoBranches);
    }
    Ok(report.covered_branches() as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GraphNode {
    pub coverage: FunctionCoverage,
    pub state: CoverageState,
    pub depth: u32,
}

/// Call graph restricted to functions reachable from the entry over observed
/// edges. Depth is the shortest edge distance from the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DynamicCallGraph {
    root: FunctionId,
    nodes: BTreeMap<FunctionId, GraphNode>,
    edges: BTreeSet<CallEdge>,
}

impl DynamicCallGraph {
    pub fn root(&self) -> &FunctionId {
        &self.root
    }

    pub fn nodes(&self) -> &BTreeMap<FunctionId, GraphNode> {
        &self.nodes
    }

    pub fn node(&self, id: &FunctionId) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> &BTreeSet<CallEdge> {
        &self.edges
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.values().map(|n| n.depth).max().unwrap_or(0)
    }
}

pub fn build_call_graph(
    total: &CoverageReport,
    root: &FunctionId,
) -> Result<DynamicCallGraph, CoverageError> {
    if !total.functions.contains_key(root) {
        return Err(CoverageError::RootUnknown(root.clone()));
    }
    let mut adjacency: BTreeMap<&FunctionId, Vec<&FunctionId>> = BTreeMap::new();
    for e in &total.call_edges {
        adjacency.entry(&e.0).or_default().push(&e.1);
    }

    let mut depth: BTreeMap<&FunctionId, u32> = BTreeMap::new();
    let mut queue = VecDeque::new();
    depth.insert(root, 0);
    queue.push_back(root);
    while let Some(f) = queue.pop_front() {
        let d = depth[f];
        for &callee in adjacency.get(f).map(Vec::as_slice).unwrap_or_default() {
            if !depth.contains_key(callee) {
                depth.insert(callee, d + 1);
                queue.push_back(callee);
            }
        }
    }

    let nodes = depth
        .iter()
        .map(|(&id, &d)| {
            let coverage = total.functions[id].clone();
            let state = classify(&coverage);
            (id.clone(), GraphNode { coverage, state, depth: d })
        })
        .collect::<BTreeMap<_, _>>();
    let edges = total
        .call_edges
        .iter()
        .filter(|e| nodes.contains_key(&e.0))
        .cloned()
        .collect();
    Ok(DynamicCallGraph { root: root.clone(), nodes, edges })
}
