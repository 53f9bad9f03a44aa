//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed XML input.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The link/joint graph is not a tree, or otherwise structurally broken.
    #[error("structure error: {0}")]
    Structure(String),

    /// A value violates a documented invariant of its type.
    #[error("validation error: {0}")]
    Validation(String),

    /// Mismatched lengths or shapes between related arguments.
    #[error("arity error: {0}")]
    Arity(String),

    /// A joint angle outside its limits in strict mode.
    #[error("joint {joint} angle {value} outside limits [{lower}, {upper}]")]
    Limit {
        joint: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    /// Degenerate geometry (zero areas, zero-norm vectors, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Numerically degenerate input, e.g. parallel vectors fed to Gram-Schmidt.
    #[error("degenerate input: {0}")]
    Degeneracy(String),

    /// A canonical mapping is inconsistent with its embodiment or layout.
    #[error("mapping error: {0}")]
    Mapping(String),

    /// A pose carries a mask that does not match the requested embodiment.
    #[error("embodiment error: {0}")]
    Embodiment(String),

    /// A morphology feature could not be extracted.
    #[error("feature error: {0}")]
    Feature(String),

    /// A non-finite value appeared mid-computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The object cannot answer the requested query (no mesh, no normals, ...).
    #[error("capability error: {0}")]
    Capability(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An index or timestep outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Missing or inconsistent runtime state (e.g. no checkpoint loaded).
    #[error("state error: {0}")]
    State(String),

    /// Closed-form grasp construction failed for the given geometry.
    #[error("generation error: {0}")]
    Generation(String),

    /// Checkpoint file malformed or incompatible with the current config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Bad run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
