//! Control flow graph data model: validation, adjacency renormalization,
//! file-level merging of function graphs, and the JSON interchange format.

mod io;
mod merge;
mod normalize;

use std::collections::VecDeque;

pub use io::{read_graph_file, read_graphs, write_graph_file, write_graphs, GRAPH_FORMAT_VERSION};
pub use merge::{merge_functions, CallEdge};
pub use normalize::{renormalize, NormalizedAdjacency};

use crate::error::GraphError;
use crate::nn::Tensor;

/// A function (or merged file) CFG: tokenized basic blocks plus directed
/// `{0,1}` adjacency with explicit entry and exit marks.
#[derive(Debug, Clone, PartialEq)]
pub struct CfgGraph {
    pub id: String,
    /// Token ids per basic block.
    pub nodes: Vec<Vec<u32>>,
    /// Raw `n×n` adjacency; `adjacency[i][j] = 1` for an edge `i → j`.
    pub adjacency: Tensor,
    pub entry: usize,
    pub exits: Vec<usize>,
    pub label: Option<u8>,
}

impl CfgGraph {
    /// Builds a graph from an edge list. Repeated edges accumulate, so a
    /// duplicated edge shows up as a non-binary entry on validation.
    pub fn from_edges(
        id: impl Into<String>,
        nodes: Vec<Vec<u32>>,
        edges: &[(usize, usize)],
        entry: usize,
        exits: Vec<usize>,
        label: Option<u8>,
    ) -> Result<Self, GraphError> {
        let n = nodes.len();
        let mut adjacency = Tensor::zeros(&[n, n]);
        for &(s, d) in edges {
            for v in [s, d] {
                if v >= n {
                    return Err(GraphError::IndexOutOfRange { node: v, n });
                }
            }
            let cur = adjacency.at(s, d);
            adjacency.set(s, d, cur + 1.0);
        }
        Ok(Self { id: id.into(), nodes, adjacency, entry, exits, label })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency.at(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let row = self.adjacency.row(node);
        (0..self.len()).filter(move |&j| row[j] != 0.0)
    }

    /// Nodes reachable from `start` along directed edges, `start` included.
    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for w in self.successors(v) {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    pub fn is_exit(&self, node: usize) -> bool {
        self.exits.contains(&node)
    }
}

/// Checks every structural invariant and that some exit is reachable
/// from the entry.
pub fn validate_graph(g: &CfgGraph) -> Result<(), GraphError> {
    let n = g.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    if g.adjacency.shape() != [n, n] {
        return Err(GraphError::IndexOutOfRange { node: g.adjacency.rows().max(g.adjacency.cols()), n });
    }
    for i in 0..n {
        for j in 0..n {
            let v = g.adjacency.at(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(GraphError::NonBinaryEntry { src: i, dst: j, value: v });
            }
        }
        if g.adjacency.at(i, i) != 0.0 {
            return Err(GraphError::DiagonalNonzero { node: i });
        }
    }
    for &v in std::iter::once(&g.entry).chain(&g.exits) {
        if v >= n {
            return Err(GraphError::IndexOutOfRange { node: v, n });
        }
    }
    for &x in &g.exits {
        if g.successors(x).next().is_some() {
            return Err(GraphError::ExitHasSuccessor { node: x });
        }
    }
    let reach = g.reachable_from(g.entry);
    if !g.exits.iter().any(|&x| reach[x]) {
        return Err(GraphError::UnreachableExit { entry: g.entry });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)], exits: Vec<usize>) -> CfgGraph {
        CfgGraph::from_edges("g", vec![vec![2, 3]; n], edges, 0, exits, None).unwrap()
    }

    #[test]
    fn single_block_is_valid() {
        assert_eq!(validate_graph(&graph(1, &[], vec![0])), Ok(()));
    }

    #[test]
    fn self_loop_is_rejected() {
        let g = graph(2, &[(0, 0), (0, 1)], vec![1]);
        assert_eq!(validate_graph(&g), Err(GraphError::DiagonalNonzero { node: 0 }));
    }

    #[test]
    fn unreachable_exit() {
        let g = graph(3, &[(0, 1)], vec![2]);
        assert_eq!(validate_graph(&g), Err(GraphError::UnreachableExit { entry: 0 }));
    }

    #[test]
    fn index_out_of_range() {
        assert!(matches!(
            CfgGraph::from_edges("g", vec![vec![]; 2], &[(0, 5)], 0, vec![1], None),
            Err(GraphError::IndexOutOfRange { node: 5, n: 2 })
        ));
        let g = graph(2, &[(0, 1)], vec![4]);
        assert_eq!(validate_graph(&g), Err(GraphError::IndexOutOfRange { node: 4, n: 2 }));
    }

    #[test]
    fn exit_with_successor() {
        let g = graph(3, &[(0, 1), (1, 2)], vec![1, 2]);
        assert_eq!(validate_graph(&g), Err(GraphError::ExitHasSuccessor { node: 1 }));
    }

    #[test]
    fn duplicate_edge_is_non_binary() {
        let g = graph(2, &[(0, 1), (0, 1)], vec![1]);
        assert!(matches!(validate_graph(&g), Err(GraphError::NonBinaryEntry { src: 0, dst: 1, .. })));
    }
}
