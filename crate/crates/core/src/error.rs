use std::path::PathBuf;

use crate::game::GameError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to parse scenario: {0}")]
    Parse(String),

    #[error("invalid scenario: {rule}: {detail}")]
    Validation { rule: &'static str, detail: String },

    #[error("unknown signal group `{0}`")]
    UnknownGroup(String),

    #[error("unknown lane `{0}`")]
    UnknownLane(String),

    #[error("unknown vehicle `{0}`")]
    UnknownVehicle(String),

    #[error("lane change rejected: {0}")]
    GapRejected(String),

    #[error("invalid lane change target: {0}")]
    InvalidTarget(String),

    #[error("stale evaluation exchange for recommendation {0}")]
    StaleEvaluation(u64),

    #[error(transparent)]
    Game(#[from] GameError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn validation(rule: &'static str, detail: impl Into<String>) -> Self {
        Error::Validation {
            rule,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
