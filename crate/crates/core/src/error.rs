use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: item {id}: field `{field}` has length {actual}, expected {expected}")]
    FeatureLength {
        line: usize,
        id: String,
        field: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("line {line}: duplicate item id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("unknown item id {0:?}")]
    UnknownItem(String),

    #[error("outfit size {0} outside [2, 5]")]
    OutfitSize(usize),

    #[error("invalid outfit: {0}")]
    InvalidOutfit(String),

    #[error("catalogue mixes departments: {0}")]
    MixedDepartment(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("word vector for {token:?} has {actual} values, expected {expected}")]
    VectorDimension {
        token: String,
        expected: usize,
        actual: usize,
    },

    #[error("no word vector resolves category {0:?}")]
    UnresolvedCategory(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("split impossible: {0}")]
    Split(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
