use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetlistError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unresolved subckt `{name}` at {line}:{col}")]
    Unresolved { name: String, line: usize, col: usize },
    #[error("instance {device} of `{subckt}` has {found} nets, expected {expected} (line {line})")]
    Arity { device: String, subckt: String, expected: usize, found: usize, line: usize },
    #[error("duplicate {what} `{name}` (line {line})")]
    Duplicate { what: String, name: String, line: usize },
    #[error("recursive instantiation involving `{name}`")]
    Recursive { name: String },
    #[error("netlist contains no devices or subcircuits")]
    Empty,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Netlist(#[from] NetlistError),
    #[error("primitive library: {0}")]
    Library(String),
    #[error("graph too large for exact GED ({n1}+{n2} vertices, limit {limit}); pass a budget")]
    GedSizeLimit { n1: usize, n2: usize, limit: usize },
    #[error("normalized distance undefined for two empty graphs")]
    EmptyGraphs,
    #[error("embedding produced by model {found}, expected {expected}")]
    ModelVersion { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("model file: {0}")]
    Model(String),
    #[error("invalid similarity bins: {0}")]
    Bins(String),
    #[error("unknown subckt `{0}`")]
    UnknownScope(String),
    #[error("training set needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
