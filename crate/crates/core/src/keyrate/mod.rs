//! Secret-key-length and secret-fraction engines.
//!
//! [`dv`] holds the discrete-variable engines (1-decoy BB84 finite key,
//! BBM92 finite key and asymptote, d-dimensional time-bin fraction);
//! [`cv`] the continuous-variable chain (parameter estimation, Holevo-bound
//! Gaussian rate, fading-channel sub-binned aggregation).

pub mod cv;
pub mod dv;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KeyRateError {
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("inconsistent block statistics: {0}")]
    InvalidStats(&'static str),
    #[error("batch too small for estimation: {0} symbols")]
    InsufficientSymbols(usize),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
    #[error("covariance model violation: symplectic eigenvalue {0} < 1")]
    ModelViolation(f64),
    #[error("no positive rate at zero excess noise")]
    NoPositiveRate,
    #[error("empty sub-channel selection")]
    EmptySelection,
    #[error("sub-channel estimates misaligned with histogram: {0}")]
    MisalignedBins(&'static str),
}
