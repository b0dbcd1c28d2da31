//! Assembly listings to tokenized control-flow graphs.

pub mod listing;
pub mod strip;
pub mod vocab;

pub use listing::{parse_listing, AsmFunction, BasicBlock, Instruction, ParsedFunction, Transfer};
pub use strip::{instruction_tokens, strip_line, strip_semantics, SYMBOL_PLACEHOLDER};
pub use vocab::{encode_block, train_vocab, Vocab};

use crate::error::Result;
use crate::graph::{merge_functions, CallEdge, CfgGraph};

/// Default maximum token-sequence length per block.
pub const DEFAULT_V_MAX: usize = 64;

/// Subword-training tokens of every instruction, after stripping.
pub fn corpus_tokens(functions: &[ParsedFunction]) -> Vec<String> {
    functions
        .iter()
        .flat_map(|p| strip_semantics(&p.function).lines)
        .flat_map(|ins| instruction_tokens(&ins))
        .collect()
}

/// Token ids of each block: the stripped block is one sentence.
pub fn block_ids(parsed: &ParsedFunction, vocab: &Vocab, v_max: usize) -> Vec<Vec<u32>> {
    let stripped = strip_semantics(&parsed.function);
    parsed
        .blocks
        .iter()
        .map(|b| {
            let tokens: Vec<String> = stripped.lines[b.start..b.end].iter().flat_map(instruction_tokens).collect();
            encode_block(&tokens, vocab, v_max)
        })
        .collect()
}

/// One validated graph per function; blocks without successors are exits.
pub fn function_graph(parsed: &ParsedFunction, vocab: &Vocab, v_max: usize, label: Option<u8>) -> Result<CfgGraph> {
    let g = CfgGraph::from_edges(
        parsed.function.name.clone(),
        block_ids(parsed, vocab, v_max),
        &parsed.edges,
        0,
        parsed.exits(),
        label,
    )?;
    crate::graph::validate_graph(&g)?;
    Ok(g)
}

/// Graphs of a whole listing. With `merge`, the functions are joined into
/// one file-level graph through their direct calls.
pub fn listing_graphs(text: &str, vocab: &Vocab, v_max: usize, merge: bool, label: Option<u8>) -> Result<Vec<CfgGraph>> {
    let parsed = parse_listing(text)?;
    let graphs = parsed.iter().map(|p| function_graph(p, vocab, v_max, label)).collect::<Result<Vec<_>>>()?;
    if !merge {
        return Ok(graphs);
    }
    let mut calls = Vec::new();
    for (gi, p) in parsed.iter().enumerate() {
        for (block, callee) in &p.calls {
            if let Some(ci) = parsed.iter().position(|q| &q.function.name == callee) {
                // a recursive call from the entry block would be a self loop
                if ci != gi || *block != 0 {
                    calls.push(CallEdge { caller_graph: gi, caller_node: *block, callee_graph: ci });
                }
            }
        }
    }
    Ok(vec![merge_functions(&graphs, &calls)?])
}
