use thiserror::Error;

use crate::fabric::CoreCoord;

/// Errors raised by the simulator.
///
/// Cost-model violations (routing budget, accounting-only memory budgets) are
/// not errors; they are recorded as flags in a [`crate::report::SimReport`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("core ({x}, {y}) is outside the {width}x{height} mesh")]
    CoordOutOfRange {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("capacity exceeded at core ({}, {}): needs {needed} bytes, budget {budget} bytes ({what})", core.x, core.y)]
    Capacity {
        core: CoreCoord,
        needed: u64,
        budget: u64,
        what: String,
    },

    #[error("KV cache full: {0}")]
    KvCapacity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
