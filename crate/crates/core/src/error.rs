use thiserror::Error;

/// Failure classes raised across the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("Hilbert space dimension {requested} exceeds the cap of {cap}")]
    Capacity { requested: usize, cap: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate measurement: every outcome probability is below {threshold:e}")]
    DegenerateMeasurement { threshold: f64 },

    #[error("invalid state: {0}")]
    StateValidity(String),

    #[error("protocol state: {0}")]
    ProtocolState(String),

    #[error("time step {dt:e} s exceeds the stability bound {bound:e} s")]
    Stability { dt: f64, bound: f64 },

    #[error("no herald after {trials} trials")]
    Timeout { trials: u64 },

    #[error("stored pair `{pair}` expired after {stored:e} s (budget {budget:e} s)")]
    MemoryExpired { pair: String, stored: f64, budget: f64 },

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
