use thiserror::Error;

use crate::tree_coding::ContourProcess;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("malformed contour: {0}")]
    Coding(String),

    /// The path horizon ran out before every excursion returned to zero.
    /// The chain embedded so far is kept for inspection.
    #[error("horizon exhausted after {completed} of {wanted} excursions")]
    IncompleteCoding {
        completed: usize,
        wanted: usize,
        partial: Box<ContourProcess>,
    },

    #[error("invalid forest: {0}")]
    Forest(String),

    #[error("contour exceeded {0} chain steps")]
    TooLarge(usize),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("unknown edge {0}")]
    Lookup(String),

    #[error("death times collide at t = {0}")]
    DeathTimeTie(f64),

    #[error("position collision at death time t = {0}")]
    Ambiguous(f64),

    #[error("empty table: {0}")]
    EmptyTable(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
