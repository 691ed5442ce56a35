//! Decoy-state time-bin BB84 block simulation.

use crate::channel::CompositeLink;
use crate::rng::StreamRng;

use super::{binomial, DetectorModel, SimError, FADING_SUBBLOCKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Z,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intensity {
    /// Signal intensity mu1.
    Signal,
    /// Decoy intensity mu2.
    Decoy,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];
    fn idx(self) -> usize {
        match self {
            Basis::Z => 0,
            Basis::X => 1,
        }
    }
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Signal, Intensity::Decoy];
    fn idx(self) -> usize {
        match self {
            Intensity::Signal => 0,
            Intensity::Decoy => 1,
        }
    }
}

/// Transmitter/protocol parameters of a 1-decoy BB84 source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoyConfig {
    /// Signal mean photon number (mu1 > mu2).
    pub mu1: f64,
    /// Decoy mean photon number.
    pub mu2: f64,
    /// Probability of sending the signal intensity.
    pub p_mu1: f64,
    pub p_z_alice: f64,
    pub p_z_bob: f64,
    pub pulse_rate: f64,
    /// Intrinsic (optical) error rate in the Z basis.
    pub intrinsic_qber_z: f64,
    pub intrinsic_qber_x: f64,
    /// Receiver topology: logical detectors per basis arm. The deployed
    /// receiver uses one Z detector and two X detectors behind the
    /// interferometer.
    pub detectors_z: u32,
    pub detectors_x: u32,
}

impl DecoyConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.mu1 > self.mu2 && self.mu2 > 0.0) {
            return Err(SimError::OutOfRange {
                what: "mean photon numbers (need mu1 > mu2 > 0)",
                value: self.mu2,
            });
        }
        for (what, v) in [
            ("p_mu1", self.p_mu1),
            ("p_z_alice", self.p_z_alice),
            ("p_z_bob", self.p_z_bob),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SimError::OutOfRange { what, value: v });
            }
        }
        for (what, v) in [
            ("intrinsic_qber_z", self.intrinsic_qber_z),
            ("intrinsic_qber_x", self.intrinsic_qber_x),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(SimError::OutOfRange { what, value: v });
            }
        }
        if !(self.pulse_rate > 0.0) {
            return Err(SimError::OutOfRange {
                what: "pulse_rate",
                value: self.pulse_rate,
            });
        }
        if self.detectors_z == 0 || self.detectors_x == 0 {
            return Err(SimError::NonPositiveCount("detectors per basis"));
        }
        Ok(())
    }

    pub fn intensity_value(&self, k: Intensity) -> f64 {
        match k {
            Intensity::Signal => self.mu1,
            Intensity::Decoy => self.mu2,
        }
    }

    pub fn intensity_prob(&self, k: Intensity) -> f64 {
        match k {
            Intensity::Signal => self.p_mu1,
            Intensity::Decoy => 1.0 - self.p_mu1,
        }
    }

    /// Probability that a pulse ends up sifted in the given basis.
    pub fn sift_prob(&self, b: Basis) -> f64 {
        match b {
            Basis::Z => self.p_z_alice * self.p_z_bob,
            Basis::X => (1.0 - self.p_z_alice) * (1.0 - self.p_z_bob),
        }
    }

    fn intrinsic_qber(&self, b: Basis) -> f64 {
        match b {
            Basis::Z => self.intrinsic_qber_z,
            Basis::X => self.intrinsic_qber_x,
        }
    }
}

/// Sifted detection and error counts of one block, per (basis, intensity).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecoyBlockStats {
    detections: [[u64; 2]; 2],
    errors: [[u64; 2]; 2],
    pub pulses_sent: u64,
    pub wall_time: f64,
}

impl DecoyBlockStats {
    pub fn from_cells(
        detections: [[u64; 2]; 2],
        errors: [[u64; 2]; 2],
        pulses_sent: u64,
        wall_time: f64,
    ) -> Self {
        Self {
            detections,
            errors,
            pulses_sent,
            wall_time,
        }
    }

    pub fn n(&self, b: Basis, k: Intensity) -> u64 {
        self.detections[b.idx()][k.idx()]
    }

    pub fn m(&self, b: Basis, k: Intensity) -> u64 {
        self.errors[b.idx()][k.idx()]
    }

    pub fn n_basis(&self, b: Basis) -> u64 {
        self.detections[b.idx()].iter().sum()
    }

    pub fn m_basis(&self, b: Basis) -> u64 {
        self.errors[b.idx()].iter().sum()
    }

    pub fn qber(&self, b: Basis) -> f64 {
        let n = self.n_basis(b);
        if n == 0 {
            0.0
        } else {
            self.m_basis(b) as f64 / n as f64
        }
    }

    /// Cell-wise consistency: errors within detections, detections within
    /// pulses sent.
    pub fn is_consistent(&self) -> bool {
        let mut total = 0u64;
        for b in 0..2 {
            for k in 0..2 {
                if self.errors[b][k] > self.detections[b][k] {
                    return false;
                }
                total += self.detections[b][k];
            }
        }
        total <= self.pulses_sent
    }

    fn add_cell(&mut self, b: Basis, k: Intensity, n: u64, m: u64) {
        self.detections[b.idx()][k.idx()] += n;
        self.errors[b.idx()][k.idx()] += m;
    }
}

/// Click probability of a threshold detector facing a weak coherent pulse:
/// `1 - (1 - p_dark) * exp(-mu * eta_total)`.
pub fn detection_probability(mu: f64, eta_total: f64, p_dark: f64) -> Result<f64, SimError> {
    if !(mu >= 0.0) {
        return Err(SimError::OutOfRange { what: "mu", value: mu });
    }
    if !(0.0..=1.0).contains(&eta_total) {
        return Err(SimError::OutOfRange {
            what: "eta_total",
            value: eta_total,
        });
    }
    if !(0.0..1.0).contains(&p_dark) {
        return Err(SimError::OutOfRange {
            what: "p_dark",
            value: p_dark,
        });
    }
    Ok(1.0 - (1.0 - p_dark) * (-mu * eta_total).exp())
}

/// Non-paralyzable dead-time saturation: `rate / (1 + rate * dead_time)`.
pub fn apply_dead_time(rate: f64, dead_time: f64) -> f64 {
    rate / (1.0 + rate * dead_time)
}

/// Cell evaluation order shared by sampling and expectation code.
const CELLS: [(Basis, Intensity); 4] = [
    (Basis::Z, Intensity::Signal),
    (Basis::Z, Intensity::Decoy),
    (Basis::X, Intensity::Signal),
    (Basis::X, Intensity::Decoy),
];

struct CellModel {
    /// Probability a pulse is assigned to this (basis, intensity) cell and
    /// sifted.
    p_assign: f64,
    /// Detection probability given assignment.
    p_det: f64,
    /// Error probability given detection.
    p_err: f64,
    /// Dead-time survival factor of the receiving basis arm.
    survive: f64,
}

fn cell_models(cfg: &DecoyConfig, det: &DetectorModel, transmission: f64) -> [CellModel; 4] {
    let eta_total = (transmission * det.efficiency).clamp(0.0, 1.0);
    let p_dark = det.dark_count_prob;

    // Raw click rate per logical detector drives the dead-time clamp; Bob's
    // basis choice routes pulses to an arm regardless of Alice's basis.
    let p_click_avg: f64 = Intensity::ALL
        .iter()
        .map(|&k| {
            cfg.intensity_prob(k)
                * detection_probability(cfg.intensity_value(k), eta_total, p_dark)
                    .expect("validated inputs")
        })
        .sum();
    let survive_for = |p_bob: f64, detectors: u32| -> f64 {
        let rate = cfg.pulse_rate * p_bob * p_click_avg / detectors as f64;
        if rate <= 0.0 {
            1.0
        } else {
            apply_dead_time(rate, det.dead_time) / rate
        }
    };
    let survive_z = survive_for(cfg.p_z_bob, cfg.detectors_z);
    let survive_x = survive_for(1.0 - cfg.p_z_bob, cfg.detectors_x);

    CELLS.map(|(b, k)| {
        let mu = cfg.intensity_value(k);
        let p_signal = 1.0 - (-mu * eta_total).exp();
        let p_det = detection_probability(mu, eta_total, p_dark).expect("validated inputs");
        // Dark-only clicks carry a random bit: half of them are errors.
        let p_dark_only = p_dark * (1.0 - p_signal);
        let p_err = if p_det > 0.0 {
            (cfg.intrinsic_qber(b) * p_signal + 0.5 * p_dark_only) / p_det
        } else {
            0.0
        };
        CellModel {
            p_assign: cfg.intensity_prob(k) * cfg.sift_prob(b),
            p_det,
            p_err: p_err.min(1.0),
            survive: match b {
                Basis::Z => survive_z,
                Basis::X => survive_x,
            },
        }
    })
}

/// Simulates one block of `n_pulses` decoy-state BB84 pulses.
///
/// Pulses are partitioned multinomially over the four sifted
/// (basis, intensity) cells, detections and errors are drawn binomially,
/// and each detection then survives the dead-time clamp of its receiving
/// arm independently, so every reported cell count is exactly binomial in
/// `n_pulses`. Fading links are split into [`FADING_SUBBLOCKS`] sub-blocks
/// with one transmission draw each.
pub fn simulate_decoy_block(
    cfg: &DecoyConfig,
    link: &CompositeLink,
    det: &DetectorModel,
    n_pulses: u64,
    rng: &mut StreamRng,
) -> Result<DecoyBlockStats, SimError> {
    cfg.validate()?;
    det.validate()?;
    if n_pulses == 0 {
        return Err(SimError::NonPositiveCount("n_pulses"));
    }

    let sub_blocks = if link.has_fading() { FADING_SUBBLOCKS } else { 1 };
    let mut stats = DecoyBlockStats::from_cells(
        [[0; 2]; 2],
        [[0; 2]; 2],
        n_pulses,
        n_pulses as f64 / cfg.pulse_rate,
    );

    let mut remaining_pulses = n_pulses;
    for sub in 0..sub_blocks {
        let pulses = remaining_pulses / (sub_blocks - sub);
        remaining_pulses -= pulses;
        if pulses == 0 {
            continue;
        }
        let transmission = if link.has_fading() {
            link.sample_transmission(rng)
        } else {
            link.mean_transmission()
        };
        let cells = cell_models(cfg, det, transmission);

        // Multinomial assignment keeps sum(n) <= pulses exactly.
        let mut left = pulses;
        let mut p_left = 1.0;
        for ((b, k), cell) in CELLS.iter().zip(&cells) {
            let p_cond = if p_left > 0.0 { (cell.p_assign / p_left).min(1.0) } else { 0.0 };
            let assigned = binomial(rng, left, p_cond);
            left -= assigned;
            p_left = (p_left - cell.p_assign).max(0.0);

            let detected = binomial(rng, assigned, cell.p_det);
            let errored = binomial(rng, detected, cell.p_err);
            // Independent per-detection dead-time survival keeps the error
            // subset consistent with the detection count.
            let kept_err = binomial(rng, errored, cell.survive);
            let kept_ok = binomial(rng, detected - errored, cell.survive);
            stats.add_cell(*b, *k, kept_err + kept_ok, kept_err);
        }
    }
    debug_assert!(stats.is_consistent());
    Ok(stats)
}

/// Expected sifted detections and errors per cell for a fixed transmission,
/// mirroring the sampling model. Used by tests and block sizing.
pub fn expected_cell_counts(
    cfg: &DecoyConfig,
    det: &DetectorModel,
    transmission: f64,
    n_pulses: u64,
) -> [[(f64, f64); 2]; 2] {
    let cells = cell_models(cfg, det, transmission);
    let mut out = [[(0.0, 0.0); 2]; 2];
    for ((b, k), c) in CELLS.iter().zip(&cells) {
        let p_cell = c.p_assign * c.p_det * c.survive;
        out[b.idx()][k.idx()] = (
            n_pulses as f64 * p_cell,
            n_pulses as f64 * p_cell * c.p_err,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelSegment;

    fn deployed_cfg() -> DecoyConfig {
        DecoyConfig {
            mu1: 0.47,
            mu2: 0.17,
            p_mu1: 0.5,
            p_z_alice: 0.5,
            p_z_bob: 0.5,
            pulse_rate: 625e6,
            intrinsic_qber_z: 0.0178,
            intrinsic_qber_x: 0.0267,
            detectors_z: 1,
            detectors_x: 2,
        }
    }

    fn spad() -> DetectorModel {
        DetectorModel {
            efficiency: 0.25,
            dark_count_prob: 1.6e-7,
            dead_time: 20e-6,
            jitter_fwhm: 0.0,
        }
    }

    fn fwf_link() -> CompositeLink {
        CompositeLink::new("fwf", vec![ChannelSegment::fso(1660.0, 20.3)]).unwrap()
    }

    #[test]
    fn detection_probability_known_values() {
        assert_eq!(detection_probability(0.0, 0.5, 0.0).unwrap(), 0.0);
        let p = detection_probability(0.47, 0.00233325, 1e-6).unwrap();
        assert!((p - 1.0970253277757802e-3).abs() < 1e-12, "{p}");
        assert!(detection_probability(-0.1, 0.5, 0.0).is_err());
        assert!(detection_probability(0.1, 1.5, 0.0).is_err());
        assert!(detection_probability(0.1, 0.5, 1.0).is_err());
    }

    #[test]
    fn detection_probability_monotone() {
        let mut rng = StreamRng::new(11);
        for _ in 0..200 {
            let mu = rng.f64() * 2.0;
            let eta = rng.f64();
            let pd = rng.f64() * 0.9;
            let base = detection_probability(mu, eta, pd).unwrap();
            assert!(detection_probability(mu + 0.1, eta, pd).unwrap() >= base);
            assert!(detection_probability(mu, (eta + 0.05).min(1.0), pd).unwrap() >= base);
            assert!(detection_probability(mu, eta, (pd + 0.01).min(0.99)).unwrap() >= base);
        }
    }

    #[test]
    fn dead_time_known_points() {
        assert_eq!(apply_dead_time(50_000.0, 20e-6), 25_000.0);
        assert_eq!(apply_dead_time(1234.0, 0.0), 1234.0);
        // saturation limit 1/dead_time
        let sat = apply_dead_time(1e12, 20e-6);
        assert!((sat - 50_000.0).abs() / 50_000.0 < 1e-6, "{sat}");
    }

    #[test]
    fn noiseless_block_has_no_errors() {
        let mut cfg = deployed_cfg();
        cfg.intrinsic_qber_z = 0.0;
        cfg.intrinsic_qber_x = 0.0;
        let mut det = spad();
        det.dark_count_prob = 0.0;
        let mut rng = StreamRng::new(1);
        let stats = simulate_decoy_block(&cfg, &fwf_link(), &det, 10_000_000, &mut rng).unwrap();
        for b in Basis::ALL {
            for k in Intensity::ALL {
                assert_eq!(stats.m(b, k), 0);
            }
        }
        assert!(stats.n_basis(Basis::Z) > 0);
    }

    #[test]
    fn counts_track_analytic_expectation() {
        let cfg = deployed_cfg();
        let det = spad();
        let link = fwf_link();
        let n_pulses = 50_000_000u64;
        let expect = expected_cell_counts(&cfg, &det, link.mean_transmission(), n_pulses);
        let mut rng = StreamRng::new(77);
        let mut miss = 0usize;
        let runs = 100;
        for _ in 0..runs {
            let stats = simulate_decoy_block(&cfg, &link, &det, n_pulses, &mut rng).unwrap();
            for (bi, b) in Basis::ALL.iter().enumerate() {
                for (ki, k) in Intensity::ALL.iter().enumerate() {
                    let (en, _) = expect[bi][ki];
                    let sigma = (en * (1.0 - en / n_pulses as f64)).sqrt();
                    if (stats.n(*b, *k) as f64 - en).abs() > 4.0 * sigma {
                        miss += 1;
                    }
                }
            }
        }
        assert!(miss <= 2, "{miss} cells out of 4-sigma in {runs} runs");
    }

    #[test]
    fn qber_converges_to_intrinsic() {
        let cfg = deployed_cfg();
        let mut det = spad();
        det.dark_count_prob = 0.0;
        let link = fwf_link();
        let mut rng = StreamRng::new(13);
        let stats = simulate_decoy_block(&cfg, &link, &det, 10_000_000, &mut rng).unwrap();
        let n = stats.n_basis(Basis::Z) as f64;
        let q = stats.qber(Basis::Z);
        let se = (cfg.intrinsic_qber_z * (1.0 - cfg.intrinsic_qber_z) / n).sqrt();
        assert!((q - 0.0178).abs() <= 3.0 * se, "q {q} se {se}");
    }

    #[test]
    fn fading_block_is_deterministic_and_consistent() {
        let cfg = deployed_cfg();
        let det = spad();
        let link = CompositeLink::new(
            "fwf-fading",
            vec![ChannelSegment::fso_fading(1660.0, 20.9, 0.9).unwrap()],
        )
        .unwrap();
        let a = simulate_decoy_block(&cfg, &link, &det, 5_000_000, &mut StreamRng::new(3)).unwrap();
        let b = simulate_decoy_block(&cfg, &link, &det, 5_000_000, &mut StreamRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_consistent());
        assert!(a.n_basis(Basis::Z) > 0);
    }

    #[test]
    fn detected_rate_respects_saturation() {
        // Saturating regime: bright channel, long dead time.
        let mut cfg = deployed_cfg();
        cfg.pulse_rate = 625e6;
        let det = DetectorModel {
            efficiency: 0.25,
            dark_count_prob: 0.0,
            dead_time: 20e-6,
            jitter_fwhm: 0.0,
        };
        let link = CompositeLink::new("short", vec![ChannelSegment::fiber(1.0, 0.1)]).unwrap();
        let n_pulses = 625_000_000u64; // one second of pulses
        let mut rng = StreamRng::new(21);
        let stats = simulate_decoy_block(&cfg, &link, &det, n_pulses, &mut rng).unwrap();
        let wall = stats.wall_time;
        // All Z-arm sifted clicks happen on one detector.
        let z_rate = stats.n_basis(Basis::Z) as f64 / wall;
        assert!(z_rate <= 1.0 / det.dead_time * 1.01, "z rate {z_rate}");
    }
}
