use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate relation name `{0}`")]
    DuplicateRelation(String),

    #[error("relation `{relation}` is many-to-one but domain `{domain}` maps to several entities")]
    CardinalityConflict { relation: String, domain: String },

    #[error("id {id} does not belong to this snapshot (size {size})")]
    ForeignId { id: u64, size: usize },

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("sample does not match schema at {path}: {detail}")]
    SchemaMismatch { path: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("aggregation over an empty instance set; substitute the imputation vector instead")]
    EmptyBag,

    #[error("empty positive pool: the denylist shares no domains with the snapshot")]
    EmptyPositivePool,

    #[error("non-finite loss at batch {batch} (domain `{domain}`)")]
    TrainingDiverged { batch: usize, domain: String },

    #[error("transformed graph exceeds the edge budget ({edges} > {budget}); set an entity degree cap")]
    EdgeBudget { edges: usize, budget: usize },

    #[error("linear system is singular in the component of `{domain}` ({size} vertices)")]
    SingularSystem { domain: String, size: usize },

    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
