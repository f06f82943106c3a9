use std::path::PathBuf;

use simagent_core::metrics::MetricsError;
use simagent_core::model::ModelError;
use simagent_core::posttrain::PosttrainError;
use simagent_core::pretrain::TrainError;
use simagent_core::testtime::TestTimeError;
use simagent_core::tokenizer::TokenizeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {what} artifact at {path}; run `{hint}` first")]
    MissingArtifact { what: &'static str, path: PathBuf, hint: &'static str },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Posttrain(#[from] PosttrainError),
    #[error(transparent)]
    TestTime(#[from] TestTimeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format { path: path.into(), msg: msg.to_string() }
    }

    /// Short category used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingArtifact { .. } => "missing-prerequisite",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            _ => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
