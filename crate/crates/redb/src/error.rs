use std::io;
use std::path::PathBuf;
use std::time::Duration;

use redb_core::balance::BalanceError;
use redb_core::cde::CdeError;
use redb_core::cloud::CloudError;
use redb_core::geom::GeomError;
use redb_core::obc::ObcError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("detector: {0}")]
    Detector(String),
    #[error("detector does not support {0}")]
    Unsupported(&'static str),
    #[error("detector handle is closed")]
    HandleClosed,
    #[error("detector did not answer within {0:?}")]
    Timeout(Duration),
    #[error("detector endpoint exited")]
    EndpointExited,
    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u32, reason: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Obc(#[from] ObcError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Cde(#[from] CdeError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Bad input rather than a failure while running. The CLI maps these to
    /// exit status 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Config(_)
                | Error::Validation(_)
                | Error::Geom(_)
                | Error::Cloud(_)
                | Error::Obc(_)
                | Error::Balance(_)
                | Error::Cde(_)
        )
    }
}
