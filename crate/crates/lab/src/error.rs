use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: zsrl_core::Error,
    },
    #[error("{stage} failed: cannot read {path}: {source}")]
    Load {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown suite {name:?}; available suites: {}", available.join(", "))]
    UnknownSuite { name: String, available: Vec<&'static str> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn stage(stage: &'static str) -> impl Fn(zsrl_core::Error) -> LabError + Copy {
        move |source| LabError::Stage { stage, source }
    }

    /// Process exit code: 2 for anything the user can fix in the invocation.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::UnknownSuite { .. } => 2,
            LabError::Load { .. } => 2,
            _ => 1,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
