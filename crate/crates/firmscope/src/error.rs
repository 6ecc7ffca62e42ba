use std::io;
use std::path::{Path, PathBuf};

use firmscope_core::session::TransitionError;
use firmscope_core::stats::StatsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("firmware {0} is locked by another writer")]
    Locked(String),
    #[error("unknown firmware {0}")]
    UnknownFirmware(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("candidate {0} has score 0 and cannot be packed")]
    EmptyCandidate(String),
    #[error("emulation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid emulation plan: {0}")]
    InvalidPlan(String),
    #[error("{0}")]
    Session(#[from] TransitionError),
    #[error("{0}")]
    Stats(#[from] StatsError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("fixture spec {name}: {reason}")]
    FixtureSpec { name: String, reason: String },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("http: {0}")]
    Http(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a path to IO errors.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}
