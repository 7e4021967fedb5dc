use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("text {text_id:?} is empty after tokenization")]
    EmptyDocument { text_id: String },
    #[error("text {text_id:?} has {tokens} tokens, too short for prefix length {length}")]
    TooShort {
        text_id: String,
        tokens: usize,
        length: usize,
    },
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("template {template_id}: user text must contain exactly one {placeholder} placeholder, found {found}")]
    Placeholder {
        template_id: u8,
        placeholder: &'static str,
        found: usize,
    },
    #[error("model {model_id}: credential variable {var} is not set")]
    MissingCredential { model_id: String, var: String },
    #[error("model {model_id}: reasoning must be disabled before querying")]
    ReasoningEnabled { model_id: String },
    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },
}

impl ConfigError {
    pub fn invalid(location: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            location: location.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("cache {}: line {line}: {message}", path.display())]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cache {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum TransportError {
    /// Throttling or server-side failure; retryable.
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    /// Connection refused, DNS failure, timeout.
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Unreachable(_) => true,
            TransportError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("model {model_id}: {source}")]
    Unreachable {
        model_id: String,
        #[source]
        source: TransportError,
    },
    #[error("model {model_id}: offline mode and no cached answer for {text_id}@{position}/l={length}/t={template_id}")]
    OfflineMiss {
        model_id: String,
        text_id: String,
        position: usize,
        length: usize,
        template_id: u8,
    },
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no sampled positions for text {text_id:?} at length {length}")]
    NoPositions { text_id: String, length: usize },
    #[error("model {model_id}: baseline text {text_id:?} not measured at length {length}")]
    MissingBaseline {
        model_id: String,
        text_id: String,
        length: usize,
    },
    #[error("model {model_id}: no baseline texts configured")]
    NoBaselines { model_id: String },
    #[error("model {model_id}: missing cells: {}", format_gaps(.gaps))]
    MissingCells {
        model_id: String,
        gaps: Vec<(String, usize)>,
    },
    #[error("model {model_id}: text {text_id:?} length {length}: {message}")]
    Inconsistent {
        model_id: String,
        text_id: String,
        length: usize,
        message: String,
    },
    #[error("profile layout mismatch: {0}")]
    Layout(String),
}

fn format_gaps(gaps: &[(String, usize)]) -> String {
    let shown: Vec<String> = gaps.iter().take(10).map(|(t, l)| format!("{t}@{l}")).collect();
    if gaps.len() > 10 {
        format!("{} (+{} more)", shown.join(", "), gaps.len() - 10)
    } else {
        shown.join(", ")
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error("incompatible profile: {0}")]
    Compatibility(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("{0}")]
    Precondition(String),
}

/// Top-level error for pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("partial measurement: {} cells missing", missing.len())]
    Partial { missing: Vec<MissingCell> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

/// A (model, text, length) cell that could not be completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingCell {
    pub model_id: String,
    pub text_id: String,
    pub length: usize,
    pub reason: String,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
