use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty region: level {level} is below the minimum {min} of H")]
    EmptyRegion { level: f64, min: f64 },

    #[error("critical energy: level {level} is within {gap:e} of critical value {critical}")]
    CriticalEnergy { level: f64, critical: f64, gap: f64 },

    #[error("spectrum too short: need levels through E = {required}, have {available}")]
    SpectrumTooShort { required: f64, available: f64 },

    #[error("regime guard in {op}: {msg}")]
    Regime { op: &'static str, msg: String },

    #[error("{module}::{op}: {msg}")]
    Numerical { module: &'static str, op: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(module: &'static str, op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numerical { module, op, msg: msg.into() }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_) | Error::Config(_) | Error::DimensionMismatch { .. } | Error::Io(_) => 2,
            Error::Regime { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
