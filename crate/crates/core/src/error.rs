use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("root schema file `{0}` not found")]
    MissingRoot(PathBuf),

    #[error("unresolved reference `{reference}` in `{from}`{}", at.as_ref().map(|p| format!(" at `{p}`")).unwrap_or_default())]
    UnresolvedRef {
        from: String,
        reference: String,
        at: Option<String>,
    },

    #[error("malformed document `{file}` at byte {offset}: {message}")]
    MalformedDocument {
        file: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("reference cycle or depth guard exceeded while resolving `{0}`")]
    CycleDetected(String),

    #[error("example directory `{0}` contains no example documents")]
    EmptyExampleDir(PathBuf),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("document is empty")]
    EmptyDocument,

    #[error("empty group `{0}`")]
    EmptyGroup(String),

    #[error("coverage denominator is zero")]
    DegenerateDenominator,

    #[error("model output contains no structured payload")]
    NoStructuredPayload,

    #[error("coverage reply lacks the `{0}` list")]
    ListParseFailure(String),

    #[error("generation incomplete: model output was truncated")]
    GenerationIncomplete,

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("authentication failed: {0}")]
    AuthFailure(String),

    #[error("provider timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingRoot(_) => "MissingRoot",
            Error::UnresolvedRef { .. } => "UnresolvedRef",
            Error::MalformedDocument { .. } => "MalformedDocument",
            Error::CycleDetected(_) => "CycleDetected",
            Error::EmptyExampleDir(_) => "EmptyExampleDir",
            Error::Precondition(_) => "PreconditionViolation",
            Error::EmptyDocument => "EmptyDocument",
            Error::EmptyGroup(_) => "EmptyGroup",
            Error::DegenerateDenominator => "DegenerateDenominator",
            Error::NoStructuredPayload => "NoStructuredPayload",
            Error::ListParseFailure(_) => "ListParseFailure",
            Error::GenerationIncomplete => "GenerationIncomplete",
            Error::ProviderUnavailable(_) => "ProviderUnavailable",
            Error::AuthFailure(_) => "AuthFailure",
            Error::Timeout(_) => "Timeout",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

/// Parses JSON text, mapping failures to `MalformedDocument` with a byte offset.
pub(crate) fn parse_json(file: &std::path::Path, text: &str) -> Result<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| Error::MalformedDocument {
        file: file.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
