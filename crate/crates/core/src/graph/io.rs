use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_graph, CfgGraph};
use crate::error::{Error, Result};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    format_version: u32,
    graphs: Vec<GraphRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: String,
    entry: usize,
    exits: Vec<usize>,
    label: Option<u8>,
    nodes: Vec<Vec<u32>>,
    edges: Vec<[usize; 2]>,
}

fn schema(context: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { context: context.into(), message: message.into() }
}

impl GraphRecord {
    fn into_graph(self, index: usize) -> Result<CfgGraph> {
        let ctx = format!("graphs[{index}] (id `{}`)", self.id);
        if let Some(l) = self.label.filter(|&l| l > 1) {
            return Err(schema(format!("{ctx}.label"), format!("label must be 0, 1 or null, got {l}")));
        }
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = CfgGraph::from_edges(self.id, self.nodes, &edges, self.entry, self.exits, self.label)
            .map_err(|e| schema(format!("{ctx}.edges"), e.to_string()))?;
        validate_graph(&g).map_err(|e| schema(ctx, e.to_string()))?;
        Ok(g)
    }

    fn from_graph(g: &CfgGraph) -> Self {
        Self {
            id: g.id.clone(),
            entry: g.entry,
            exits: g.exits.clone(),
            label: g.label,
            nodes: g.nodes.clone(),
            edges: g.edges().into_iter().map(|(s, d)| [s, d]).collect(),
        }
    }
}

/// Parses a graph file from a JSON string.
pub fn read_graphs(text: &str) -> Result<Vec<CfgGraph>> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.format_version != GRAPH_FORMAT_VERSION {
        return Err(schema(
            "format_version",
            format!("expected {GRAPH_FORMAT_VERSION}, got {}", file.format_version),
        ));
    }
    file.graphs.into_iter().enumerate().map(|(i, r)| r.into_graph(i)).collect()
}

pub fn write_graphs(graphs: &[CfgGraph]) -> Result<String> {
    let file = GraphFile {
        format_version: GRAPH_FORMAT_VERSION,
        graphs: graphs.iter().map(GraphRecord::from_graph).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn read_graph_file(path: impl AsRef<Path>) -> Result<Vec<CfgGraph>> {
    read_graphs(&fs::read_to_string(path)?)
}

pub fn write_graph_file(graphs: &[CfgGraph], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_graphs(graphs)?)?;
    Ok(())
}
