//! Entangled-pair (BBM92) coincidence block simulation.

use crate::channel::CompositeLink;
use crate::rng::StreamRng;

use super::{binomial, DetectorModel, SimError, FADING_SUBBLOCKS};

/// Entangled photon-pair source parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSourceModel {
    /// Pair emission rate, pairs/s.
    pub pair_rate: f64,
    /// Two-photon interference visibility in [0, 1].
    pub visibility: f64,
    /// Fraction of coincidences that are accidentals, in [0, 1).
    pub accidental_fraction: f64,
}

impl PairSourceModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.pair_rate > 0.0) {
            return Err(SimError::OutOfRange {
                what: "pair_rate",
                value: self.pair_rate,
            });
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(SimError::OutOfRange {
                what: "visibility",
                value: self.visibility,
            });
        }
        if !(0.0..1.0).contains(&self.accidental_fraction) {
            return Err(SimError::OutOfRange {
                what: "accidental_fraction",
                value: self.accidental_fraction,
            });
        }
        Ok(())
    }
}

/// Sifted coincidence statistics of one collection interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairBlockStats {
    pub n_sifted: u64,
    pub m_errors: u64,
    pub duration: f64,
}

impl PairBlockStats {
    pub fn qber(&self) -> f64 {
        if self.n_sifted == 0 {
            0.0
        } else {
            self.m_errors as f64 / self.n_sifted as f64
        }
    }
}

/// Error probability of a coincidence: imperfect visibility flips a genuine
/// pair with probability `(1-V)/2`, and accidentals are uncorrelated coin
/// flips.
pub fn pair_error_probability(visibility: f64, accidental_fraction: f64) -> f64 {
    (1.0 - visibility) / 2.0 * (1.0 - accidental_fraction) + 0.5 * accidental_fraction
}

/// Key/parameter-estimation partition of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairBlockSplit {
    pub n_key: u64,
    pub m_key: u64,
    pub n_pe: u64,
    pub m_pe: u64,
}

impl PairBlockSplit {
    pub fn q_key(&self) -> f64 {
        if self.n_key == 0 {
            0.0
        } else {
            self.m_key as f64 / self.n_key as f64
        }
    }

    pub fn q_pe(&self) -> f64 {
        if self.n_pe == 0 {
            0.0
        } else {
            self.m_pe as f64 / self.n_pe as f64
        }
    }
}

/// Randomly sacrifices a fraction of the sifted coincidences for parameter
/// estimation; errors and correct bits are thinned independently so the
/// partition stays consistent.
pub fn split_pair_block(
    stats: &PairBlockStats,
    pe_fraction: f64,
    rng: &mut StreamRng,
) -> PairBlockSplit {
    let f = pe_fraction.clamp(0.0, 1.0);
    let m_pe = binomial(rng, stats.m_errors, f);
    let ok_pe = binomial(rng, stats.n_sifted - stats.m_errors, f);
    PairBlockSplit {
        n_key: stats.n_sifted - m_pe - ok_pe,
        m_key: stats.m_errors - m_pe,
        n_pe: m_pe + ok_pe,
        m_pe,
    }
}

/// Simulates one coincidence collection of the given duration over the two
/// source-to-receiver arms.
pub fn simulate_pair_block(
    src: &PairSourceModel,
    link_a: &CompositeLink,
    link_b: &CompositeLink,
    det_a: &DetectorModel,
    det_b: &DetectorModel,
    duration: f64,
    rng: &mut StreamRng,
) -> Result<PairBlockStats, SimError> {
    src.validate()?;
    det_a.validate()?;
    det_b.validate()?;
    if !(duration > 0.0) {
        return Err(SimError::OutOfRange {
            what: "duration",
            value: duration,
        });
    }

    let pairs_total = (src.pair_rate * duration).round() as u64;
    let fading = link_a.has_fading() || link_b.has_fading();
    let sub_blocks = if fading { FADING_SUBBLOCKS } else { 1 };
    let q = pair_error_probability(src.visibility, src.accidental_fraction);

    let mut n_sifted = 0u64;
    let mut m_errors = 0u64;
    let mut remaining = pairs_total;
    for sub in 0..sub_blocks {
        let pairs = remaining / (sub_blocks - sub);
        remaining -= pairs;
        if pairs == 0 {
            continue;
        }
        let t_a = if link_a.has_fading() {
            link_a.sample_transmission(rng)
        } else {
            link_a.mean_transmission()
        };
        let t_b = if link_b.has_fading() {
            link_b.sample_transmission(rng)
        } else {
            link_b.mean_transmission()
        };
        let p_coinc = det_a.efficiency * det_b.efficiency * t_a * t_b;
        let n = binomial(rng, pairs, p_coinc);
        let m = binomial(rng, n, q);
        n_sifted += n;
        m_errors += m;
    }
    Ok(PairBlockStats {
        n_sifted,
        m_errors,
        duration,
    })
}
