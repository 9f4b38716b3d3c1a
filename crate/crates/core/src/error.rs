use thiserror::Error;

/// Errors raised across the engine.
///
/// Variants map one-to-one onto the failure kinds callers are expected to
/// distinguish (the CLI turns them into exit codes, the HTTP service into
/// status codes).
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("parse error on line {line}: {message}")]
    ParseLine { line: usize, message: String },

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate entry: {0}")]
    DuplicateEntry(String),

    #[error("not found: {}", .0.join(", "))]
    NotFound(Vec<String>),

    #[error("incompatible store: {0}")]
    IncompatibleStore(String),

    #[error("backend unavailable: {message}")]
    BackendUnavailable { status: Option<u16>, message: String },

    #[error("replay miss for request {hash}")]
    ReplayMiss { hash: String },

    #[error("schema generation failed: {reason}")]
    GenerationFailed { reason: String, raw_output: String },

    #[error("offline build failed: every cluster failed to generate a schema")]
    BuildFailed,

    #[error("unparseable diagnosis")]
    UnparseableDiagnosis { raw_output: String },

    #[error("invalid diagnosis: {0}")]
    InvalidDiagnosis(String),

    #[error("recognition failed after retry")]
    RecognitionFailed { first_output: String, retry_output: String },

    #[error("expansion failed: {0}")]
    ExpansionFailed(Box<Error>),

    #[error("distillation failed: {0}")]
    DistillationFailed(String),

    #[error("injection planning failed: {0}")]
    PlanningFailed(String),

    #[error("error injection failed: {0}")]
    InjectionFailed(String),

    #[error("synthesis failed: every item was skipped")]
    SynthesisFailed,

    #[error("config error: {0}")]
    Config(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::ParseLine { .. } => "ParseError",
            Error::SchemaViolation(_) => "SchemaViolation",
            Error::InvalidInput(_) => "InvalidInput",
            Error::DuplicateEntry(_) => "DuplicateEntry",
            Error::NotFound(_) => "NotFound",
            Error::IncompatibleStore(_) => "IncompatibleStore",
            Error::BackendUnavailable { .. } => "BackendUnavailable",
            Error::ReplayMiss { .. } => "ReplayMiss",
            Error::GenerationFailed { .. } => "GenerationFailed",
            Error::BuildFailed => "BuildFailed",
            Error::UnparseableDiagnosis { .. } => "UnparseableDiagnosis",
            Error::InvalidDiagnosis(_) => "InvalidDiagnosis",
            Error::RecognitionFailed { .. } => "RecognitionFailed",
            Error::ExpansionFailed(_) => "ExpansionFailed",
            Error::DistillationFailed(_) => "DistillationFailed",
            Error::PlanningFailed(_) => "PlanningFailed",
            Error::InjectionFailed(_) => "InjectionFailed",
            Error::SynthesisFailed => "SynthesisFailed",
            Error::Config(_) => "ConfigError",
            Error::Internal(_) => "InternalError",
            Error::Io(_) => "IoError",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn violation(msg: impl Into<String>) -> Self {
        Error::SchemaViolation(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
