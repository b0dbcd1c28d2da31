use serde::{Deserialize, Serialize};

use super::{validate_graph, CfgGraph};
use crate::error::GraphError;
use crate::nn::Tensor;

/// A call from `caller_node` of graph `caller_graph` into the entry of
/// graph `callee_graph` (indices into the merged list).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller_graph: usize,
    pub caller_node: usize,
    pub callee_graph: usize,
}

/// Merges function graphs into one file-level graph.
///
/// Node indices of graph `k` are offset by the node count of graphs
/// `0..k`. Each call edge adds `caller → entry(callee)`. The entry is the
/// first graph's entry; a caller that was an exit stops being one. The
/// merged label is 1 if any function is labeled 1, 0 if all are labeled 0.
pub fn merge_functions(graphs: &[CfgGraph], call_edges: &[CallEdge]) -> Result<CfgGraph, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut total = 0;
    for g in graphs {
        offsets.push(total);
        total += g.len();
    }
    for c in call_edges {
        for gi in [c.caller_graph, c.callee_graph] {
            if gi >= graphs.len() {
                return Err(GraphError::DanglingCallTarget { graph: gi, node: c.caller_node });
            }
        }
        let n = graphs[c.caller_graph].len();
        if c.caller_node >= n {
            return Err(GraphError::IndexOutOfRange { node: c.caller_node, n });
        }
    }

    let mut adjacency = Tensor::zeros(&[total, total]);
    let mut nodes = Vec::with_capacity(total);
    let mut exits = Vec::new();
    for (g, &off) in graphs.iter().zip(&offsets) {
        nodes.extend(g.nodes.iter().cloned());
        for (s, d) in g.edges() {
            adjacency.set(off + s, off + d, 1.0);
        }
        exits.extend(g.exits.iter().map(|x| x + off));
    }
    for c in call_edges {
        let src = offsets[c.caller_graph] + c.caller_node;
        let dst = offsets[c.callee_graph] + graphs[c.callee_graph].entry;
        adjacency.set(src, dst, adjacency.at(src, dst) + 1.0);
        exits.retain(|&x| x != src);
    }

    let label = if graphs.iter().any(|g| g.label == Some(1)) {
        Some(1)
    } else if graphs.iter().all(|g| g.label == Some(0)) {
        Some(0)
    } else {
        None
    };
    let id = graphs.iter().map(|g| g.id.as_str()).collect::<Vec<_>>().join("+");
    let merged = CfgGraph { id, nodes, adjacency, entry: graphs[0].entry, exits, label };
    validate_graph(&merged)?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(id: &str) -> CfgGraph {
        CfgGraph::from_edges(id, vec![vec![5], vec![6]], &[(0, 1)], 0, vec![1], Some(0)).unwrap()
    }

    #[test]
    fn identity_merge() {
        let g = chain("f");
        let m = merge_functions(std::slice::from_ref(&g), &[]).unwrap();
        assert_eq!(m.nodes, g.nodes);
        assert_eq!(m.edges(), g.edges());
        assert_eq!(m.exits, g.exits);
    }

    #[test]
    fn two_chains_one_call() {
        let call = CallEdge { caller_graph: 0, caller_node: 0, callee_graph: 1 };
        let m = merge_functions(&[chain("a"), chain("b")], &[call]).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.edges(), vec![(0, 1), (0, 2), (2, 3)]);
        assert_eq!(m.exits, vec![1, 3]);
        assert_eq!(m.id, "a+b");
    }

    #[test]
    fn dangling_call_target() {
        let call = CallEdge { caller_graph: 0, caller_node: 0, callee_graph: 7 };
        assert!(matches!(
            merge_functions(&[chain("a")], &[call]),
            Err(GraphError::DanglingCallTarget { graph: 7, .. })
        ));
    }
}
