//! Command failures and their exit codes.

use std::fmt;
use std::process::ExitCode;

use slavtag::config::ConfigError;
use slavtag::corpus::CorpusError;
use slavtag::dataset::DatasetError;
use slavtag::evaluator::EvalError;
use slavtag::model::ModelError;
use slavtag::postprocess::PostprocessError;
use slavtag::trainer::TrainError;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable, inconsistent or missing inputs (exit 2).
    Data(String),
    /// Non-finite values or failed numeric checks (exit 3).
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        })
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Failure::Data(msg.to_string())
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(msg.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::usage(e)
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::data(e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::data(e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::data(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::data(e)
    }
}

impl From<PostprocessError> for Failure {
    fn from(e: PostprocessError) -> Self {
        Failure::data(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::StepOutOfRange { .. } => Failure::usage(e),
            _ => Failure::data(e),
        }
    }
}

/// Maps an I/O error on `path` to a data failure.
pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}
