//! Analytic expectations of the simulated block statistics, derived by
//! hand from the stated click model rather than from the simulator code.

/// Inputs describing one decoy-state BB84 configuration at a fixed channel
/// transmission.
#[derive(Debug, Clone, Copy)]
pub struct DecoySetup {
    pub mu1: f64,
    pub mu2: f64,
    pub p_mu1: f64,
    pub p_z_alice: f64,
    pub p_z_bob: f64,
    pub pulse_rate: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    pub detectors_z: u32,
    pub detectors_x: u32,
    pub det_efficiency: f64,
    pub dark_count_prob: f64,
    pub dead_time: f64,
    pub transmission: f64,
}

/// Expected value and variance of one count cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellExpectation {
    pub mean_n: f64,
    pub var_n: f64,
    pub mean_m: f64,
    pub var_m: f64,
}

/// Expected sifted detections/errors per `[basis][intensity]` cell
/// (basis 0 = Z, 1 = X; intensity 0 = signal, 1 = decoy).
///
/// A pulse contributes to cell (b, k) when intensity k was chosen, both
/// parties picked basis b, the detector clicked, and the click survived the
/// dead-time clamp of that arm; each stage thins independently, so the cell
/// count is binomial with the product probability.
pub fn decoy_cells(s: &DecoySetup, n_pulses: u64) -> [[CellExpectation; 2]; 2] {
    let eta = s.transmission * s.det_efficiency;
    let p_click = |mu: f64| 1.0 - (1.0 - s.dark_count_prob) * (-mu * eta).exp();
    let click_avg = s.p_mu1 * p_click(s.mu1) + (1.0 - s.p_mu1) * p_click(s.mu2);

    let survive = |p_bob: f64, detectors: u32| {
        let per_det_rate = s.pulse_rate * p_bob * click_avg / detectors as f64;
        1.0 / (1.0 + per_det_rate * s.dead_time)
    };
    let f_z = survive(s.p_z_bob, s.detectors_z);
    let f_x = survive(1.0 - s.p_z_bob, s.detectors_x);

    let n = n_pulses as f64;
    let mut out = [[CellExpectation {
        mean_n: 0.0,
        var_n: 0.0,
        mean_m: 0.0,
        var_m: 0.0,
    }; 2]; 2];
    for (bi, (p_sift, f, e_int)) in [
        (s.p_z_alice * s.p_z_bob, f_z, s.qber_z),
        ((1.0 - s.p_z_alice) * (1.0 - s.p_z_bob), f_x, s.qber_x),
    ]
    .into_iter()
    .enumerate()
    {
        for (ki, (mu, p_int)) in [(s.mu1, s.p_mu1), (s.mu2, 1.0 - s.p_mu1)].into_iter().enumerate()
        {
            let p_signal = 1.0 - (-mu * eta).exp();
            let p_det = p_click(mu);
            let p_dark_only = s.dark_count_prob * (1.0 - p_signal);
            let e = (e_int * p_signal + 0.5 * p_dark_only) / p_det;
            let p_n = p_int * p_sift * p_det * f;
            let p_m = p_n * e;
            out[bi][ki] = CellExpectation {
                mean_n: n * p_n,
                var_n: n * p_n * (1.0 - p_n),
                mean_m: n * p_m,
                var_m: n * p_m * (1.0 - p_m),
            };
        }
    }
    out
}

/// Expected coincidences/errors of one pair-source collection.
#[allow(clippy::too_many_arguments)]
pub fn pair_block(
    pair_rate: f64,
    duration: f64,
    eff_a: f64,
    eff_b: f64,
    t_a: f64,
    t_b: f64,
    visibility: f64,
    accidental_fraction: f64,
) -> (CellExpectation, f64) {
    let trials = (pair_rate * duration).round();
    let p = eff_a * eff_b * t_a * t_b;
    let q = (1.0 - visibility) / 2.0 * (1.0 - accidental_fraction) + 0.5 * accidental_fraction;
    let p_m = p * q;
    (
        CellExpectation {
            mean_n: trials * p,
            var_n: trials * p * (1.0 - p),
            mean_m: trials * p_m,
            var_m: trials * p_m * (1.0 - p_m),
        },
        q,
    )
}
