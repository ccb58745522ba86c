use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A config that fails to parse or validate. `line`/`column` are 1-based
    /// and point at the offending key when it can be located.
    #[error("{}", config_message(.path, *.line, *.column, .key.as_deref(), .message))]
    Config {
        path: PathBuf,
        line: Option<usize>,
        column: Option<usize>,
        key: Option<String>,
        message: String,
    },

    #[error("missing model file {0} (run `oga pretrain` first)")]
    MissingModel(PathBuf),

    #[error("{path} was produced under a different configuration ({found}, expected {expected})")]
    StaleArtifact {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("output directory {0} is locked by another run; remove .oga.lock if it is stale")]
    Locked(PathBuf),

    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] oga_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.into(),
            message: message.into(),
        }
    }
}

fn config_message(
    path: &std::path::Path,
    line: Option<usize>,
    column: Option<usize>,
    key: Option<&str>,
    message: &str,
) -> String {
    let mut s = path.display().to_string();
    if let Some(l) = line {
        s.push_str(&format!(":{l}"));
        if let Some(c) = column {
            s.push_str(&format!(":{c}"));
        }
    }
    if let Some(k) = key {
        s.push_str(&format!(": key `{k}`"));
    }
    s.push_str(&format!(": {message}"));
    s
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
