use thiserror::Error;

use crate::structures::Violation;

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("split depth {depth} needs at least 2^{depth} variables, got {d_vars}")]
    TooDeep { depth: usize, d_vars: usize },
    #[error("image has zero area")]
    ZeroArea,
    #[error("image {height}x{width} does not match {d_vars} variables")]
    ImageSize { height: usize, width: usize, d_vars: usize },
    #[error("expected a {0} structure configuration")]
    WrongConfig(&'static str),
    #[error("{0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("invalid region graph: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("cycle detected while layering the region graph")]
    Cycle,
    #[error("vector length must be at least 1 (K={k}, K_root={k_root})")]
    VectorLength { k: usize, k_root: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("variable {var}: value {value} outside the support of the leaf family")]
    OutOfSupport { var: usize, value: f64 },
    #[error("NaN produced at layer {layer}, row {row}")]
    NaN { layer: usize, row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requested before a forward pass")]
    BackwardBeforeForward,
    #[error("evidence has zero probability under the model")]
    ImpossibleEvidence,
    #[error("variable sets are not a partition of the variables: {0}")]
    VariableSets(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("dataset is empty")]
    EmptyData,
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("non-finite parameter in {location} (epoch {epoch}, batch {batch})")]
    NonFinite {
        location: String,
        epoch: usize,
        batch: usize,
    },
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    Magic { expected: &'static str },
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("shape mismatch for tensor '{tensor}': {detail}")]
    Shape { tensor: String, detail: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("malformed data: {0}")]
    Data(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
}
