use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label {0}: expected 0 or 1")]
    InvalidLabel(usize),

    #[error("dataset has no positive pairs")]
    NoPositivePairs,

    #[error("dataset has {found} distinct identities; {unit} sampling needs at least {required}")]
    TooFewIdentities {
        unit: &'static str,
        required: usize,
        found: usize,
    },

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("could not place {requested} identity centers at separation {separation} after {attempts} attempts")]
    InfeasibleSeparation {
        requested: usize,
        separation: f64,
        attempts: usize,
    },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed header in {}: {msg}", path.display())]
    MalformedHeader { path: PathBuf, msg: String },

    #[error("shape disagreement in {}: expected {expected:?}, found {found:?}", path.display())]
    ShapeDisagreement {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed manifest {}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged at iteration {iteration}: non-finite {what}")]
    Diverged { iteration: u64, what: &'static str },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("rank {k} out of range for gallery of size {gallery}")]
    RankOutOfRange { k: usize, gallery: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
