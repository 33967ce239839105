//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedforge_core::coverage::{build_call_graph, BranchRecord, CallEdge, CoverageReport, DynamicCallGraph, FunctionCoverage};

pub const ROOT: &str = "LLVMFuzzerTestOneInput";

/// A random call tree of `n` functions with partially covered nodes and
/// sources of varying length.
pub fn random_graph(seed: u64, n: usize) -> DynamicCallGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n).map(|i| if i == 0 { ROOT.to_owned() } else { format!("fn_{i}") }).collect();
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        edges.push(CallEdge::new(names[parent].as_str(), names[i].as_str()));
    }
    let functions = names.iter().map(|name| {
        let k = rng.gen_range(1..6);
        let branches = (0..2 * k).map(|b| BranchRecord::new(format!("{}:{}", b / 2, if b % 2 == 0 { 'T' } else { 'F' }), rng.gen_bool(0.5))).collect();
        let lines = rng.gen_range(5..80);
        let source: String = (0..lines).map(|l| format!("  int v{l} = data[{l}] ^ {};\n", rng.gen::<u8>())).collect();
        FunctionCoverage::new(name.as_str(), "bench.c", true, branches, source).expect("valid function")
    });
    let report = CoverageReport::new(functions, edges, 1).expect("valid report");
    build_call_graph(&report, &ROOT.into()).expect("root present")
}
