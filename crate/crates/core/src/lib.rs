//! Calibration of a detector POVM from joint records against a tomographer.
//!
//! A known bipartite state `R` is shared between the detector under test and
//! a tomographically complete measurement. Conditioning the tomographer's
//! reconstruction on detector outcome `n` gives `p(n) ρ_n = R(P_n)`; inverting
//! the linear map `R` recovers `P_n`. Maximum likelihood over the POVM set is
//! offered as the alternative estimator.

pub mod detectors;
pub mod error;
pub mod qmath;
pub mod quorum;
pub mod recon_avg;
pub mod recon_ml;
pub mod sampler;
pub mod scenario;
pub mod states;
pub mod stats;

pub use error::{Error, Result};
pub use qmath::{ComplexOperator, C64};
