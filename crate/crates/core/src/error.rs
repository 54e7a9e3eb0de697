use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown stance label word: {0:?}")]
    UnknownLabelWord(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    ProviderUnavailable { attempts: u32, message: String },

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("model returned an empty completion")]
    EmptyCompletion,

    #[error("no mock script rule matches prompt starting with {0:?}")]
    NoScriptMatch(String),

    #[error("missing binding for placeholder {{{0}}}")]
    MissingBinding(String),

    #[error("unknown template: {0}")]
    UnknownTemplate(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image decode error: {0}")]
    ImageDecode(String),

    #[error("cannot parse adjudicator output: {0}")]
    Parse(String),

    #[error("duplicate record id: {0}")]
    DuplicateId(String),

    #[error("store too small: no eligible record left for replacement")]
    StoreTooSmall,

    #[error("store format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { expected: u32, found: u32 },

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("missing image file: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("unknown label {value} at row {row}")]
    UnknownLabel { row: usize, value: i64 },

    #[error("length mismatch: {left} predictions vs {right} gold labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("{tag}: {source}")]
    Stage {
        tag: String,
        #[source]
        source: Box<Error>,
    },

    #[error("while processing {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the stage/agent tag it surfaced under.
    pub fn at_stage(self, tag: impl Into<String>) -> Error {
        Error::Stage {
            tag: tag.into(),
            source: Box::new(self),
        }
    }

    pub fn for_record(self, id: impl Into<String>) -> Error {
        Error::Record {
            id: id.into(),
            source: Box::new(self),
        }
    }

    /// Strips stage/record wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Record { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
