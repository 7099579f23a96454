use thiserror::Error;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    /// The twin-beam squeezing parameter leaves the state unnormalizable.
    #[error("unnormalizable state: xi = {xi} must satisfy 0 <= xi < 1")]
    Unnormalizable { xi: f64 },

    #[error("not a quorum: projector family has operator rank {rank}, need {required}")]
    NotAQuorum { rank: usize, required: usize },

    #[error("noise map is not invertible: condition number {condition:e} exceeds {bound:e}")]
    NonInvertibleNoise { condition: f64, bound: f64 },

    #[error("kernel construction failed: unbiasedness residual {residual:e} exceeds {tolerance:e}")]
    KernelConstruction { residual: f64, tolerance: f64 },

    #[error("homodyne efficiency {eta_h} is not invertible (need eta_h > 1/2)")]
    EfficiencyTooLow { eta_h: f64 },

    #[error("truncation too small: tail mass {tail:e} exceeds {tolerance:e}")]
    TailMass { tail: f64, tolerance: f64 },

    #[error("numerically invalid probability {value:e} at {location}")]
    NumericalValidity { value: f64, location: String },

    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    #[error("input state is not faithful on the reconstruction subspace (condition number {condition:e})")]
    NotFaithful { condition: f64 },

    #[error("bootstrap failed: {failures} of {repetitions} repetitions failed")]
    Bootstrap { failures: usize, repetitions: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
