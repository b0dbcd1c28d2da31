use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Graph validation failures. Each variant names the offending node.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {node}: adjacency diagonal is nonzero")]
    DiagonalNonzero { node: usize },
    #[error("node index {node} out of range for graph with {n} nodes")]
    IndexOutOfRange { node: usize, n: usize },
    #[error("no exit is reachable from entry node {entry}")]
    UnreachableExit { entry: usize },
    #[error("exit node {node} has outgoing edges")]
    ExitHasSuccessor { node: usize },
    #[error("adjacency entry ({src},{dst}) = {value} is not 0 or 1")]
    NonBinaryEntry { src: usize, dst: usize, value: f64 },
    #[error("graph has no nodes")]
    Empty,
    #[error("call edge references missing graph {graph} (node {node})")]
    DanglingCallTarget { graph: usize, node: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("schema violation at {context}: {message}")]
    Schema { context: String, message: String },
    #[error("unknown jump target `{label}` in function `{function}`")]
    UnknownJumpTarget { function: String, label: String },
    #[error("function `{0}` has no instructions")]
    EmptyFunction(String),
    #[error("vocabulary target size {target} is below the minimum {minimum}")]
    TargetSizeTooSmall { target: usize, minimum: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("node {0} has no non-pad tokens")]
    AllPadNode(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value detected in {0}")]
    NanDetected(String),
    #[error("loss is nondeterministic: {first} != {second} at identical parameters")]
    NondeterministicLoss { first: f64, second: f64 },

    #[error("fixed-point iteration diverged at iteration {iteration} (residual {residual:e})")]
    Divergence { iteration: usize, residual: f64 },
    #[error("adjoint solve diverged at iteration {iteration} (residual {residual:e})")]
    AdjointDivergence { iteration: usize, residual: f64 },

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("graph `{0}` has no label")]
    LabelMissing(String),
    #[error("synthetic spec is infeasible: {0}")]
    InfeasibleSpec(String),
    #[error("generated label for graph {index} disagrees with reachability oracle")]
    OracleMismatch { index: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (divergence, NaN).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NanDetected(_)
                | Error::Divergence { .. }
                | Error::AdjointDivergence { .. }
                | Error::NondeterministicLoss { .. }
        )
    }
}
