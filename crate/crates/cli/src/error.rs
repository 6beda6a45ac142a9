use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("spec {path}: {message}")]
    Spec { path: PathBuf, message: String },

    #[error("bad IDX magic at byte offset {offset}: found {found:#04x}")]
    BadMagic { offset: usize, found: u8 },

    #[error("truncated payload: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("report has no rows")]
    EmptyReport,

    #[error("{0}")]
    Engine(#[from] vitleak_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} gradient checks exceeded tolerance")]
    GradcheckFailed { failed: usize, total: usize },

    #[error("{0}")]
    Usage(String),
}

/// Exit statuses, one per failure class. Clap itself exits with 2 on
/// malformed command lines.
pub const EXIT_CODES: &[(i32, &str)] = &[
    (0, "success"),
    (2, "command-line usage error"),
    (3, "gradient check exceeded tolerance"),
    (4, "invalid experiment spec or argument"),
    (5, "file read or write failed"),
    (6, "malformed IDX or image data"),
    (7, "attack or model error"),
    (8, "report has no rows"),
];

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn spec(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        HarnessError::Spec {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    /// Short stable identifier used in the error record.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Io { .. } => "io",
            HarnessError::Spec { .. } => "spec",
            HarnessError::BadMagic { .. } => "bad-magic",
            HarnessError::Truncated { .. } => "truncated",
            HarnessError::ImageFormat(_) => "image-format",
            HarnessError::EmptyReport => "empty-report",
            HarnessError::Engine(_) => "engine",
            HarnessError::Csv(_) => "csv",
            HarnessError::Json(_) => "json",
            HarnessError::GradcheckFailed { .. } => "gradcheck-failed",
            HarnessError::Usage(_) => "usage",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::GradcheckFailed { .. } => 3,
            HarnessError::Spec { .. } | HarnessError::Usage(_) => 4,
            HarnessError::Io { .. } | HarnessError::Csv(_) | HarnessError::Json(_) => 5,
            HarnessError::BadMagic { .. } | HarnessError::Truncated { .. } | HarnessError::ImageFormat(_) => 6,
            HarnessError::Engine(vitleak_core::Error::Io(_)) => 5,
            HarnessError::Engine(vitleak_core::Error::InvalidConfig(_)) => 4,
            HarnessError::Engine(_) => 7,
            HarnessError::EmptyReport => 8,
        }
    }

    /// One-line JSON object describing the failure.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("plain struct serializes")
    }
}
