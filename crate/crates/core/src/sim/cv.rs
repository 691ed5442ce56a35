//! Continuous-variable quadrature-exchange simulation.
//!
//! Shot-noise-unit convention: vacuum quadrature variance is 1; heterodyne
//! detection splits the signal power by 2, and its extra vacuum unit is
//! absorbed into the constant noise term. Per quadrature the measurement is
//!
//! ```text
//! y_q = sqrt(T * eta / 2) * x_q + n_q,   Var(n_q) = 1 + v_el + T * eta * xi / 2
//! ```
//!
//! with `xi` the excess noise referred to the channel input.

use rand_distr::{Distribution, Normal};

use crate::channel::CompositeLink;
use crate::rng::StreamRng;

use super::SimError;

/// In-phase/quadrature component pair of one symbol.
pub type Iq = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvModulation {
    Gaussian,
    Qpsk,
}

/// Transmitter and receiver parameters of a CV exchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvConfig {
    pub modulation: CvModulation,
    /// Modulation variance in snu; per quadrature the symbol variance is
    /// `v_a / 2`.
    pub v_a: f64,
    /// Channel-input excess noise, snu.
    pub xi: f64,
    /// Receiver quantum efficiency.
    pub det_efficiency: f64,
    /// Electronic noise, snu.
    pub v_el: f64,
    pub symbol_rate: f64,
}

impl CvConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.v_a > 0.0) {
            return Err(SimError::OutOfRange {
                what: "v_a",
                value: self.v_a,
            });
        }
        if !(self.xi >= 0.0) {
            return Err(SimError::OutOfRange {
                what: "xi",
                value: self.xi,
            });
        }
        if !(self.det_efficiency > 0.0 && self.det_efficiency <= 1.0) {
            return Err(SimError::OutOfRange {
                what: "det_efficiency",
                value: self.det_efficiency,
            });
        }
        if !(self.v_el >= 0.0) {
            return Err(SimError::OutOfRange {
                what: "v_el",
                value: self.v_el,
            });
        }
        if !(self.symbol_rate > 0.0) {
            return Err(SimError::OutOfRange {
                what: "symbol_rate",
                value: self.symbol_rate,
            });
        }
        Ok(())
    }
}

/// One batch of transmitted symbols and heterodyne outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct CvBatch {
    pub alice_symbols: Vec<Iq>,
    pub bob_quadratures: Vec<Iq>,
    /// Channel transmission applied to each symbol.
    pub transmission_used: Vec<f64>,
}

impl CvBatch {
    pub fn len(&self) -> usize {
        self.alice_symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alice_symbols.is_empty()
    }
}

/// Simulates `n_symbols` of modulation, transmission, and heterodyne
/// measurement; the transmission is redrawn per symbol on fading links.
pub fn simulate_cv_batch(
    cfg: &CvConfig,
    link: &CompositeLink,
    n_symbols: usize,
    rng: &mut StreamRng,
) -> Result<CvBatch, SimError> {
    cfg.validate()?;
    if n_symbols == 0 {
        return Err(SimError::NonPositiveCount("n_symbols"));
    }

    let amp = (cfg.v_a / 2.0).sqrt();
    let symbol_normal = Normal::new(0.0, amp).expect("v_a validated");
    let fading = link.has_fading();
    let t_fixed = link.mean_transmission();

    let mut alice = Vec::with_capacity(n_symbols);
    let mut bob = Vec::with_capacity(n_symbols);
    let mut used = Vec::with_capacity(n_symbols);
    for _ in 0..n_symbols {
        let t = if fading { link.sample_transmission(rng) } else { t_fixed };
        let gain = (t * cfg.det_efficiency / 2.0).sqrt();
        let noise_sd = (1.0 + cfg.v_el + t * cfg.det_efficiency * cfg.xi / 2.0).sqrt();
        let noise = Normal::new(0.0, noise_sd).expect("nonnegative variance");

        let x: Iq = match cfg.modulation {
            CvModulation::Qpsk => {
                let bits = rng.next_u64();
                [
                    if bits & 1 == 0 { amp } else { -amp },
                    if bits & 2 == 0 { amp } else { -amp },
                ]
            }
            CvModulation::Gaussian => [symbol_normal.sample(rng), symbol_normal.sample(rng)],
        };
        let y: Iq = [
            gain * x[0] + noise.sample(rng),
            gain * x[1] + noise.sample(rng),
        ];
        alice.push(x);
        bob.push(y);
        used.push(t);
    }
    Ok(CvBatch {
        alice_symbols: alice,
        bob_quadratures: bob,
        transmission_used: used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{transmission_to_db, ChannelSegment};

    fn fixed_link(t: f64) -> CompositeLink {
        CompositeLink::new("cv", vec![ChannelSegment::fiber(300.0, transmission_to_db(t))])
            .unwrap()
    }

    fn var(xs: impl Iterator<Item = f64> + Clone) -> f64 {
        let n = xs.clone().count() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }

    #[test]
    fn vacuum_channel_is_pure_shot_noise() {
        // T -> 0 leaves only the vacuum unit.
        let cfg = CvConfig {
            modulation: CvModulation::Qpsk,
            v_a: 2.0,
            xi: 0.0,
            det_efficiency: 0.92,
            v_el: 0.0,
            symbol_rate: 25e6,
        };
        let link = fixed_link(1e-12);
        let mut rng = StreamRng::new(1);
        let batch = simulate_cv_batch(&cfg, &link, 200_000, &mut rng).unwrap();
        for q in 0..2 {
            let v = var(batch.bob_quadratures.iter().map(|y| y[q]));
            let se = v * (2.0 / batch.len() as f64).sqrt();
            assert!((v - 1.0).abs() <= 3.0 * se, "var {v}");
        }
    }

    #[test]
    fn output_moments_match_model() {
        // Anchored to the free-space campaign point: T = 0.346, xi = 0.0034.
        let cfg = CvConfig {
            modulation: CvModulation::Qpsk,
            v_a: 2.0,
            xi: 0.0034,
            det_efficiency: 0.92,
            v_el: 0.05,
            symbol_rate: 25e6,
        };
        let t = 0.346;
        let link = fixed_link(t);
        let mut rng = StreamRng::new(2);
        let n = 1_000_000;
        let batch = simulate_cv_batch(&cfg, &link, n, &mut rng).unwrap();

        let te = t * cfg.det_efficiency;
        let expected_var = te / 2.0 * (cfg.v_a / 2.0) + 1.0 + cfg.v_el + te * cfg.xi / 2.0;
        let expected_cov = (te / 2.0f64).sqrt() * cfg.v_a / 2.0;
        for q in 0..2 {
            let v = var(batch.bob_quadratures.iter().map(|y| y[q]));
            let se_v = expected_var * (2.0 / n as f64).sqrt();
            assert!((v - expected_var).abs() <= 3.0 * se_v, "var {v} vs {expected_var}");

            let mean_x = batch.alice_symbols.iter().map(|x| x[q]).sum::<f64>() / n as f64;
            let mean_y = batch.bob_quadratures.iter().map(|y| y[q]).sum::<f64>() / n as f64;
            let cov = batch
                .alice_symbols
                .iter()
                .zip(&batch.bob_quadratures)
                .map(|(x, y)| (x[q] - mean_x) * (y[q] - mean_y))
                .sum::<f64>()
                / n as f64;
            // Var of the sample covariance ~ (Var(x)Var(y) + cov^2) / n.
            let se_c = ((cfg.v_a / 2.0 * expected_var + expected_cov * expected_cov) / n as f64).sqrt();
            assert!((cov - expected_cov).abs() <= 3.0 * se_c, "cov {cov} vs {expected_cov}");
        }
    }

    #[test]
    fn qpsk_symbols_have_constant_modulus() {
        let cfg = CvConfig {
            modulation: CvModulation::Qpsk,
            v_a: 0.6,
            xi: 0.0,
            det_efficiency: 0.76,
            v_el: 0.0,
            symbol_rate: 200e6,
        };
        let mut rng = StreamRng::new(3);
        let batch = simulate_cv_batch(&cfg, &fixed_link(0.98), 1000, &mut rng).unwrap();
        let amp = (0.6f64 / 2.0).sqrt();
        for x in &batch.alice_symbols {
            assert!((x[0].abs() - amp).abs() < 1e-12);
            assert!((x[1].abs() - amp).abs() < 1e-12);
        }
    }

    #[test]
    fn fading_records_per_symbol_transmission() {
        let cfg = CvConfig {
            modulation: CvModulation::Qpsk,
            v_a: 2.0,
            xi: 0.0034,
            det_efficiency: 0.92,
            v_el: 0.05,
            symbol_rate: 25e6,
        };
        let link = CompositeLink::new(
            "fso810",
            vec![ChannelSegment::fso_fading(1660.0, transmission_to_db(0.346), 0.1).unwrap()],
        )
        .unwrap();
        let mut rng = StreamRng::new(4);
        let batch = simulate_cv_batch(&cfg, &link, 50_000, &mut rng).unwrap();
        let mean = batch.transmission_used.iter().sum::<f64>() / batch.len() as f64;
        assert!((mean - 0.346).abs() < 0.01, "{mean}");
        let distinct = batch
            .transmission_used
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count();
        assert!(distinct > 40_000);
    }
}
