use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("measure `{measure}` requires a binary label space, got {classes} classes")]
    UnsupportedMeasure { measure: String, classes: usize },
    #[error("invalid measure parameter: {0}")]
    InvalidMeasure(String),
    #[error("thresholds must be strictly ascending (violated at position {position})")]
    InvalidGrid { position: usize },
    #[error("measure is undefined at the supplied risk (zero denominator)")]
    UndefinedMeasure,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid weight {weight} at record {index}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("stratification degenerate: {nonempty} nonempty histogram cells for K = {requested}; achievable K <= {nonempty}")]
    DegenerateStratification { requested: usize, nonempty: usize },
    #[error("tree shape mismatch: branching {branching}^depth {depth} != K = {blocks}")]
    TreeShape {
        blocks: usize,
        branching: usize,
        depth: usize,
    },
    #[error("block map does not match tree: {0}")]
    BlockMap(String),
    #[error("degenerate measure: every item has zero weighted loss norm")]
    DegenerateMeasure,
    #[error("degenerate proposal: normalizer is zero")]
    DegenerateProposal,
    #[error("label {label} outside label space of size {classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("item index {item} outside pool of size {size}")]
    ItemOutOfRange { item: usize, size: usize },
    #[error("oracle has no label for item `{0}`")]
    MissingLabel(String),
    #[error("sampler state: {0}")]
    State(String),
    #[error("proposal history lacks support for items {items:?}")]
    SupportViolation { items: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
}
