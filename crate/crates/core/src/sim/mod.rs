//! Monte-Carlo simulation of QKD sessions over composite links.
//!
//! Each simulator turns (protocol config, channel, detector model, seed)
//! into the per-block statistics the key-rate engines consume. Counts are
//! sampled from exact binomial/multinomial laws at the aggregate level, so
//! multi-gigapulse blocks run at desk scale; fading channels are split into
//! sub-blocks with one transmission draw each.

mod cv;
mod decoy;
mod pair;

pub use cv::{simulate_cv_batch, CvBatch, CvConfig, CvModulation};
pub use decoy::{
    apply_dead_time, detection_probability, expected_cell_counts, simulate_decoy_block, Basis,
    DecoyBlockStats, DecoyConfig, Intensity,
};
pub use pair::{
    pair_error_probability, simulate_pair_block, split_pair_block, PairBlockSplit, PairBlockStats,
    PairSourceModel,
};

use thiserror::Error;

/// Number of per-transmission-draw sub-blocks used when a link fades.
pub const FADING_SUBBLOCKS: u64 = 128;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("{0} must be positive")]
    NonPositiveCount(&'static str),
}

/// Click detector parameters shared by the DV simulators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorModel {
    /// Detection efficiency in (0, 1].
    pub efficiency: f64,
    /// Dark-count probability per gate in [0, 1).
    pub dark_count_prob: f64,
    /// Non-paralyzable dead time, seconds.
    pub dead_time: f64,
    /// Timing jitter FWHM, seconds; carried as metadata only.
    pub jitter_fwhm: f64,
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(SimError::OutOfRange {
                what: "detector efficiency",
                value: self.efficiency,
            });
        }
        if !(0.0..1.0).contains(&self.dark_count_prob) {
            return Err(SimError::OutOfRange {
                what: "dark_count_prob",
                value: self.dark_count_prob,
            });
        }
        if !(self.dead_time >= 0.0) {
            return Err(SimError::OutOfRange {
                what: "dead_time",
                value: self.dead_time,
            });
        }
        Ok(())
    }
}

pub(crate) fn binomial(rng: &mut crate::rng::StreamRng, n: u64, p: f64) -> u64 {
    use rand_distr::Distribution;
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    rand_distr::Binomial::new(n, p)
        .expect("checked binomial parameters")
        .sample(rng)
}
