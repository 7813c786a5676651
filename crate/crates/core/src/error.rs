use thiserror::Error;

use crate::solver::SolverError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("device {device} uploads {bits} bits at zero rate")]
    ZeroRate { device: usize, bits: f64 },

    #[error("device {device} holds {bits} bits but has zero CPU frequency")]
    ZeroFrequency { device: usize, bits: f64 },

    #[error("upload time {t_up} s of device {device} does not fit the deadline {deadline} s")]
    UploadTooLong {
        device: usize,
        t_up: f64,
        deadline: f64,
    },

    #[error("active device needs {required:.6e} Hz but is capped at {cap:.6e} Hz")]
    ActiveCapExceeded { required: f64, cap: f64 },

    #[error("the oracle handles at most two offloading devices, got {0}")]
    TooManyDevices(usize),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
