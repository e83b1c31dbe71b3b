use thiserror::Error;

/// Errors raised across the simulator and the detection pipeline.
#[derive(Debug, Error)]
pub enum IscError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("series of length {len} too short for window requiring {required} samples")]
    WindowTooShort { len: usize, required: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("Vandermonde matrix ill-conditioned (condition number {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("distributions defined on different grids ({left} vs {right} points)")]
    GridMismatch { left: usize, right: usize },

    #[error("simulation fault at t = {time:.3} s: {reason}")]
    SimulationFault { time: f64, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown scenario '{0}' (expected 'resting' or 'charging')")]
    UnknownScenario(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl IscError {
    /// True for errors caused by degenerate numerical input rather than bad user input.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            IscError::DegenerateData(_) | IscError::IllConditioned { .. } | IscError::SimulationFault { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, IscError>;
