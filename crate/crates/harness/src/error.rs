use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Core(#[from] fedq_core::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// One or more verification checks failed.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category for the JSON error report.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Core(fedq_core::Error::Config(_)) | HarnessError::Config(_) | HarnessError::Json(_) => {
                "config"
            }
            HarnessError::Core(_) => "numeric",
            HarnessError::Io { .. } => "io",
            HarnessError::Verification(_) => "verification",
        }
    }

    pub fn report(&self) -> serde_json::Value {
        serde_json::json!({
            "error": self.category(),
            "message": self.to_string(),
        })
    }
}
