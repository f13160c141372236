use thiserror::Error;

use crate::ingest::IngestError;
use crate::leaderboard::LeaderboardError;
use crate::metrics::MetricError;
use crate::probe::ProbeError;
use crate::runner::TicketError;
use crate::scoring::ScoringError;
use crate::synth::SynthError;

/// Crate-level error; every module error converts into it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Leaderboard(#[from] LeaderboardError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ticket(#[from] TicketError),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    WorkerPool(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
