use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    /// A required input file from an earlier step is absent.
    #[error("missing {what}: {} not found (run `{producer}` first)", path.display())]
    MissingInput {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    #[error("stage order violated: {0}")]
    StageOrder(String),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("report does not match its schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Core(#[from] drift_ptq_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        PipelineError::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Usage problems (bad flags or config, missing inputs, steps run out of
    /// order) exit with 1, everything else with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingInput { .. } | PipelineError::StageOrder(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
