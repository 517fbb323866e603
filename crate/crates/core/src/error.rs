use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is below the normalization floor")]
    DegenerateVector { norm: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("anchor {anchor} has no positives in the batch")]
    EmptyPositives { anchor: usize },

    #[error("majority class is empty; cannot place prototypes")]
    NoMajorityClass,

    #[error("near-collapsed init reached mean cosine similarity {similarity:.6}, target {target}")]
    InitFailed { similarity: f64, target: f64 },

    #[error("probe training set contains a single class")]
    SingleClassTrainSet,

    #[error("probe test set is empty or contains a single class")]
    SingleClassTestSet,

    #[error("non-finite loss at epoch {epoch}, step {step}{}", dump_suffix(.dump))]
    NumericalDivergence {
        epoch: usize,
        step: usize,
        dump: Option<PathBuf>,
    },

    #[error("insufficient data: {rows} usable rows, need at least {needed}")]
    InsufficientData { rows: usize, needed: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn dump_suffix(dump: &Option<PathBuf>) -> String {
    match dump {
        Some(p) => format!(" (batch dumped to {})", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn batch(msg: impl Into<String>) -> Self {
        Error::InvalidBatch(msg.into())
    }
}
