use std::path::PathBuf;

use crate::pairgen::Direction;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("reference normalizes to zero tokens (row {})", .row_id.as_deref().unwrap_or("unknown"))]
    EmptyReference { row_id: Option<String> },

    #[error("translator output for {direction} still contains source-language tokens after {attempts} attempts: {output:?}")]
    TranslatorViolation {
        direction: Direction,
        attempts: usize,
        output: String,
    },

    #[error("rejected text normalizes equal to chosen")]
    DegenerateRejection,

    #[error("translator request failed: {0}")]
    Translator(String),

    #[error("invalid rejection strategy: {0}")]
    InvalidStrategy(String),

    #[error("chosen transcript is not code-switched: {0:?}")]
    NotMixed(String),

    #[error("empty {0} pool")]
    EmptyPool(&'static str),

    #[error("sample rate mismatch in {path}: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("channel count mismatch in {path}: expected {expected}, found {found}")]
    ChannelMismatch {
        path: PathBuf,
        expected: u16,
        found: u16,
    },

    #[error("unreadable audio {path}: {reason}")]
    UnreadableAudio { path: PathBuf, reason: String },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("every transcription request failed ({0} rows)")]
    AllRowsFailed(usize),

    #[error("invalid data in row {row_id:?}: {reason}")]
    InvalidRow { row_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyReference { .. } => "EmptyReference",
            Error::TranslatorViolation { .. } => "TranslatorViolation",
            Error::DegenerateRejection => "DegenerateRejection",
            Error::Translator(_) => "Translator",
            Error::InvalidStrategy(_) => "InvalidStrategy",
            Error::NotMixed(_) => "NotMixed",
            Error::EmptyPool(_) => "EmptyPool",
            Error::SampleRateMismatch { .. } => "SampleRateMismatch",
            Error::ChannelMismatch { .. } => "ChannelMismatch",
            Error::UnreadableAudio { .. } => "UnreadableAudio",
            Error::ManifestMismatch(_) => "ManifestMismatch",
            Error::AllRowsFailed(_) => "AllRowsFailed",
            Error::InvalidRow { .. } => "InvalidRow",
            Error::Config(_) => "Config",
            Error::Json { .. } => "Json",
            Error::Io { .. } => "Io",
        }
    }

    /// The offending row, when the error is tied to one.
    pub fn row_id(&self) -> Option<&str> {
        match self {
            Error::EmptyReference { row_id } => row_id.as_deref(),
            Error::InvalidRow { row_id, .. } => Some(row_id),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
