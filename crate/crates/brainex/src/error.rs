use std::path::{Path, PathBuf};

/// Errors from file handling, configuration and the pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("NIfTI format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("dimensionality error: {0}")]
    Dimensionality(String),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Core(#[from] brainex_core::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::InFile { .. }) => e,
            e => Error::InFile { path: path.to_path_buf(), source: Box::new(e) },
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// The innermost error, skipping file and stage context.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } | Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
