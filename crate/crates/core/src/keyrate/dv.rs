//! Discrete-variable secret-key engines.
//!
//! The finite-key bounds follow the 1-decoy analysis used by the deployed
//! BB84 system and a Hoeffding-style entanglement bound for BBM92. All
//! statistical lower bounds clamp at zero and the phase error at 1/2, which
//! yields abort semantics on pathological statistics instead of NaNs.

use crate::sim::{Basis, DecoyBlockStats, Intensity};

use super::KeyRateError;

/// Binary entropy in bits, with `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, KeyRateError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(KeyRateError::OutOfRange {
            what: "binary_entropy argument",
            value: x,
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// Entropy of a d-ary symbol with total error probability `x` spread over
/// the `d - 1` wrong outcomes; reduces to [`binary_entropy`] at `d = 2`.
pub fn d_dim_entropy(x: f64, d: u32) -> Result<f64, KeyRateError> {
    if d < 2 {
        return Err(KeyRateError::OutOfRange {
            what: "dimension",
            value: d as f64,
        });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(KeyRateError::OutOfRange {
            what: "d_dim_entropy argument",
            value: x,
        });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let wrong = (d - 1) as f64;
    let tail = if x == 1.0 { 0.0 } else { -(1.0 - x) * (1.0 - x).log2() };
    Ok(-x * (x / wrong).log2() + tail)
}

/// Hoeffding concentration half-width `sqrt(n/2 * ln(1/eps))`.
pub fn hoeffding_delta(n: u64, eps: f64) -> f64 {
    (n as f64 / 2.0 * (1.0 / eps).ln()).sqrt()
}

/// Poisson photon-number mixture weight: probability that a pulse carries
/// `n` photons given the two-intensity mix.
pub fn tau_n(mu1: f64, mu2: f64, p_mu1: f64, n: u32) -> f64 {
    let mut fact = 1.0;
    for i in 2..=n {
        fact *= i as f64;
    }
    let term = |p: f64, mu: f64| p * (-mu).exp() * mu.powi(n as i32) / fact;
    term(p_mu1, mu1) + term(1.0 - p_mu1, mu2)
}

/// Parameters of the 1-decoy finite-key bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneDecoyParams {
    pub eps_sec: f64,
    pub eps_cor: f64,
    /// Error-correction inefficiency, >= 1.
    pub f_ec: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub p_mu1: f64,
}

impl OneDecoyParams {
    fn validate(&self) -> Result<(), KeyRateError> {
        for (what, v) in [("eps_sec", self.eps_sec), ("eps_cor", self.eps_cor)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(KeyRateError::OutOfRange { what, value: v });
            }
        }
        if !(self.f_ec >= 1.0) {
            return Err(KeyRateError::OutOfRange {
                what: "f_ec",
                value: self.f_ec,
            });
        }
        if !(self.mu1 > self.mu2 && self.mu2 > 0.0) {
            return Err(KeyRateError::OutOfRange {
                what: "intensities (need mu1 > mu2 > 0)",
                value: self.mu2,
            });
        }
        if !(self.p_mu1 > 0.0 && self.p_mu1 < 1.0) {
            return Err(KeyRateError::OutOfRange {
                what: "p_mu1",
                value: self.p_mu1,
            });
        }
        Ok(())
    }
}

/// Parameters of the BBM92 finite-key bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbm92Params {
    pub eps_sec: f64,
    pub eps_cor: f64,
    /// Abort threshold on the parameter-estimation QBER.
    pub q_tol: f64,
    pub f_ec: f64,
}

impl Bbm92Params {
    fn validate(&self) -> Result<(), KeyRateError> {
        for (what, v) in [("eps_sec", self.eps_sec), ("eps_cor", self.eps_cor)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(KeyRateError::OutOfRange { what, value: v });
            }
        }
        if !(self.q_tol > 0.0 && self.q_tol < 0.5) {
            return Err(KeyRateError::OutOfRange {
                what: "q_tol",
                value: self.q_tol,
            });
        }
        if !(self.f_ec >= 1.0) {
            return Err(KeyRateError::OutOfRange {
                what: "f_ec",
                value: self.f_ec,
            });
        }
        Ok(())
    }
}

/// Diagnostics of one finite-key evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KeyLengthDiagnostics {
    /// Lower bound on vacuum detections in the key basis.
    pub s0_lower: f64,
    /// Lower bound on single-photon detections in the key basis.
    pub s1_lower: f64,
    /// Upper bound on the single-photon phase error rate.
    pub phase_error_upper: f64,
    /// Error-correction leakage in bits.
    pub lambda_ec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyLengthResult {
    pub secret_bits: u64,
    pub aborted: bool,
    pub diagnostics: KeyLengthDiagnostics,
}

impl KeyLengthResult {
    fn aborted_with(diagnostics: KeyLengthDiagnostics) -> Self {
        Self {
            secret_bits: 0,
            aborted: true,
            diagnostics,
        }
    }
}

/// Phase-error correction term for passing single-photon statistics from
/// the test basis to the key basis.
fn gamma(a: f64, b: f64, c: f64, d: f64) -> f64 {
    if b <= 0.0 {
        return 0.0;
    }
    let t1 = (c + d) * (1.0 - b) * b / (c * d * std::f64::consts::LN_2);
    let t2 = ((c + d) / (c * d * (1.0 - b) * b) * ((21.0 * 21.0) / (a * a))).log2();
    (t1 * t2).max(0.0).sqrt()
}

/// Finite secret-key length of one 1-decoy BB84 block.
///
/// Z is the key basis, X the test basis. Statistics are scaled by
/// `e^mu / p_mu` with Hoeffding half-widths at `eps_sec / 19`, the vacuum
/// and single-photon yields are bounded from the two intensities, and the
/// phase error is transferred from X to Z with the gamma correction. An
/// abort (zero key, flag set) is returned when the single-photon bounds
/// collapse to zero or the phase error reaches 1/2; inconsistent counts are
/// a validation error instead.
pub fn onedecoy_key_length(
    stats: &DecoyBlockStats,
    p: &OneDecoyParams,
) -> Result<KeyLengthResult, KeyRateError> {
    p.validate()?;
    if !stats.is_consistent() {
        return Err(KeyRateError::InvalidStats(
            "errors exceed detections or detections exceed pulses",
        ));
    }

    let eps1 = p.eps_sec / 19.0;
    let tau0 = tau_n(p.mu1, p.mu2, p.p_mu1, 0);
    let tau1 = tau_n(p.mu1, p.mu2, p.p_mu1, 1);

    struct BasisBounds {
        s0_l: f64,
        s1_l: f64,
        v1_u: f64,
    }

    let bounds = |basis: Basis| -> BasisBounds {
        let n_tot = stats.n_basis(basis);
        let m_tot = stats.m_basis(basis);
        let dn = hoeffding_delta(n_tot, eps1);
        let dm = hoeffding_delta(m_tot, eps1);
        let scale = |k: Intensity| match k {
            Intensity::Signal => p.mu1.exp() / p.p_mu1,
            Intensity::Decoy => p.mu2.exp() / (1.0 - p.p_mu1),
        };
        let n_plus = |k: Intensity| scale(k) * (stats.n(basis, k) as f64 + dn);
        let n_minus = |k: Intensity| scale(k) * (stats.n(basis, k) as f64 - dn);
        let m_plus = |k: Intensity| scale(k) * (stats.m(basis, k) as f64 + dm);
        let m_minus = |k: Intensity| scale(k) * (stats.m(basis, k) as f64 - dm);

        let s0_l = (tau0 * (p.mu1 * n_minus(Intensity::Decoy) - p.mu2 * n_plus(Intensity::Signal))
            / (p.mu1 - p.mu2))
            .max(0.0);
        let s0_u = 2.0 * (tau0 * m_plus(Intensity::Decoy) + dn);
        let s1_l = (tau1 * p.mu1 / (p.mu2 * (p.mu1 - p.mu2))
            * (n_minus(Intensity::Decoy)
                - (p.mu2 * p.mu2) / (p.mu1 * p.mu1) * n_plus(Intensity::Signal)
                - (p.mu1 * p.mu1 - p.mu2 * p.mu2) / (p.mu1 * p.mu1) * s0_u / tau0))
            .max(0.0);
        let v1_u = (tau1 * (m_plus(Intensity::Signal) - m_minus(Intensity::Decoy))
            / (p.mu1 - p.mu2))
            .max(0.0);
        BasisBounds { s0_l, s1_l, v1_u }
    };

    let z = bounds(Basis::Z);
    let x = bounds(Basis::X);

    let mut diagnostics = KeyLengthDiagnostics {
        s0_lower: z.s0_l,
        s1_lower: z.s1_l,
        phase_error_upper: 0.5,
        lambda_ec: 0.0,
    };

    if x.s1_l <= 0.0 || z.s1_l <= 0.0 {
        return Ok(KeyLengthResult::aborted_with(diagnostics));
    }

    let ratio = x.v1_u / x.s1_l;
    let phase_error = if ratio >= 0.5 {
        0.5
    } else {
        (ratio + gamma(p.eps_sec, ratio, x.s1_l, z.s1_l)).min(0.5)
    };
    diagnostics.phase_error_upper = phase_error;

    let n_z = stats.n_basis(Basis::Z);
    let qber_z = if n_z > 0 {
        stats.m_basis(Basis::Z) as f64 / n_z as f64
    } else {
        0.0
    };
    let lambda_ec = p.f_ec * n_z as f64 * binary_entropy(qber_z)?;
    diagnostics.lambda_ec = lambda_ec;

    if phase_error >= 0.5 {
        return Ok(KeyLengthResult::aborted_with(diagnostics));
    }

    let length = z.s0_l + z.s1_l * (1.0 - binary_entropy(phase_error)?)
        - lambda_ec
        - 6.0 * (19.0 / p.eps_sec).log2()
        - (2.0 / p.eps_cor).log2();

    Ok(KeyLengthResult {
        secret_bits: length.max(0.0).floor() as u64,
        aborted: false,
        diagnostics,
    })
}

/// Finite secret-key length of one BBM92 block split into `n_key` key bits
/// (observed QBER `q_key`) and `n_pe` parameter-estimation bits (`q_pe`).
pub fn bbm92_key_length(
    n_key: u64,
    n_pe: u64,
    q_key: f64,
    q_pe: f64,
    p: &Bbm92Params,
) -> Result<KeyLengthResult, KeyRateError> {
    p.validate()?;
    if n_key == 0 || n_pe == 0 {
        return Err(KeyRateError::InvalidStats("zero key or PE count"));
    }
    for (what, v) in [("q_key", q_key), ("q_pe", q_pe)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(KeyRateError::OutOfRange { what, value: v });
        }
    }

    let mut diagnostics = KeyLengthDiagnostics::default();
    if q_pe > p.q_tol {
        diagnostics.phase_error_upper = q_pe;
        return Ok(KeyLengthResult::aborted_with(diagnostics));
    }

    let (nk, np) = (n_key as f64, n_pe as f64);
    let nu = ((nk + np) * (np + 1.0) / (nk * (np * np)) * (4.0 / p.eps_sec).ln()).sqrt();
    let phase = (q_pe + nu).min(0.5);
    diagnostics.phase_error_upper = phase;
    let lambda_ec = p.f_ec * nk * binary_entropy(q_key)?;
    diagnostics.lambda_ec = lambda_ec;

    let length = nk * (1.0 - binary_entropy(phase)?)
        - lambda_ec
        - (2.0 / p.eps_cor).log2()
        - 2.0 * (19.0 / p.eps_sec).log2();

    Ok(KeyLengthResult {
        secret_bits: length.max(0.0).floor() as u64,
        aborted: false,
        diagnostics,
    })
}

/// Asymptotic BBM92 secret fraction per sifted coincidence.
pub fn bbm92_asymptotic_fraction(q: f64, f_ec: f64) -> Result<f64, KeyRateError> {
    if !(0.0..0.5).contains(&q) {
        return Err(KeyRateError::OutOfRange {
            what: "qber",
            value: q,
        });
    }
    let h = binary_entropy(q)?;
    Ok((1.0 - h - f_ec * h).max(0.0))
}

/// Asymptotic secret fraction of a d-dimensional time-bin protocol, bits
/// per sifted symbol.
pub fn hd_secret_fraction(d: u32, e_z: f64, e_x: f64) -> Result<f64, KeyRateError> {
    let max_err = (d - 1) as f64 / d as f64;
    for (what, v) in [("e_z", e_z), ("e_x", e_x)] {
        if !(0.0..=max_err).contains(&v) {
            return Err(KeyRateError::OutOfRange { what, value: v });
        }
    }
    Ok(((d as f64).log2() - d_dim_entropy(e_z, d)? - d_dim_entropy(e_x, d)?).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DecoyBlockStats;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn deployed_params() -> OneDecoyParams {
        OneDecoyParams {
            eps_sec: 1e-9,
            eps_cor: 1e-15,
            f_ec: 1.16,
            mu1: 0.47,
            mu2: 0.17,
            p_mu1: 0.5,
        }
    }

    #[test]
    fn entropy_known_values() {
        close(binary_entropy(0.5).unwrap(), 1.0, 1e-15);
        close(binary_entropy(0.0).unwrap(), 0.0, 0.0);
        close(binary_entropy(1.0).unwrap(), 0.0, 0.0);
        close(binary_entropy(0.06).unwrap(), 0.32744491915447627, 1e-12);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn d_dim_entropy_values() {
        close(d_dim_entropy(0.0, 4).unwrap(), 0.0, 0.0);
        close(d_dim_entropy(0.041, 4).unwrap(), 0.31184197718992557, 1e-12);
        for x in [0.0, 0.1, 0.37, 0.5, 0.9] {
            close(
                d_dim_entropy(x, 2).unwrap(),
                binary_entropy(x).unwrap(),
                1e-12,
            );
        }
        assert!(d_dim_entropy(0.1, 1).is_err());
    }

    #[test]
    fn hoeffding_values() {
        assert_eq!(hoeffding_delta(0, 0.5), 0.0);
        close(hoeffding_delta(50_000, 1e-9 / 19.0), 769.2155877274078, 1e-9);
        // monotone in n and 1/eps
        assert!(hoeffding_delta(100, 1e-9) > hoeffding_delta(50, 1e-9));
        assert!(hoeffding_delta(100, 1e-12) > hoeffding_delta(100, 1e-9));
    }

    #[test]
    fn tau_known_values() {
        close(tau_n(0.47, 0.17, 0.5, 0), 0.7343335424395423, 1e-12);
        close(tau_n(0.47, 0.17, 0.5, 1), 0.2185870424571273, 1e-12);
        // p_mu1 = 1 reduces to the Poisson pmf of mu1
        let pmf = |mu: f64, n: u32| {
            let mut f = 1.0;
            for i in 2..=n {
                f *= i as f64;
            }
            (-mu).exp() * mu.powi(n as i32) / f
        };
        for n in 0..4 {
            close(tau_n(0.47, 0.17, 1.0 - 1e-300, n), pmf(0.47, n), 1e-9);
        }
    }

    #[test]
    fn onedecoy_empty_block_aborts() {
        let stats = DecoyBlockStats::from_cells([[0; 2]; 2], [[0; 2]; 2], 1000, 1.0);
        let res = onedecoy_key_length(&stats, &deployed_params()).unwrap();
        assert!(res.aborted);
        assert_eq!(res.secret_bits, 0);
    }

    #[test]
    fn onedecoy_half_qber_yields_nothing() {
        let n = [[40_000u64, 14_000], [40_000, 14_000]];
        let m = [[20_000u64, 7_000], [20_000, 7_000]];
        let stats = DecoyBlockStats::from_cells(n, m, 10_000_000_000, 16.0);
        let res = onedecoy_key_length(&stats, &deployed_params()).unwrap();
        assert_eq!(res.secret_bits, 0);
    }

    #[test]
    fn onedecoy_inconsistent_stats_is_error_not_abort() {
        let n = [[100u64, 50], [100, 50]];
        let m = [[200u64, 0], [0, 0]];
        let stats = DecoyBlockStats::from_cells(n, m, 1_000_000, 1.0);
        assert!(matches!(
            onedecoy_key_length(&stats, &deployed_params()),
            Err(KeyRateError::InvalidStats(_))
        ));
    }

    #[test]
    fn onedecoy_monotone_in_errors() {
        // Key-basis errors only enter the leakage term, so they are
        // monotone cell-wise; test-basis errors enter the single-photon
        // error bound through both intensities, so the physical direction
        // is a proportional worsening of the X error rate.
        let n = [[36_722u64, 13_287], [62_414, 22_585]];
        let base_m = [[654u64, 236], [1_666, 603]];
        let stats = DecoyBlockStats::from_cells(n, base_m, 2_000_000_000, 2.4);
        let base = onedecoy_key_length(&stats, &deployed_params()).unwrap();
        assert!(base.secret_bits > 0);
        assert!(!base.aborted);

        for (bi, ki) in [(0usize, 0usize), (0, 1), (1, 0)] {
            let mut worse = base_m;
            worse[bi][ki] += 100;
            let stats2 = DecoyBlockStats::from_cells(n, worse, 2_000_000_000, 2.4);
            let res = onedecoy_key_length(&stats2, &deployed_params()).unwrap();
            assert!(
                res.secret_bits <= base.secret_bits,
                "cell ({bi},{ki}): {} > {}",
                res.secret_bits,
                base.secret_bits
            );
        }

        let mut prev = base.secret_bits;
        for scale in [1.2f64, 1.5, 2.0, 3.0] {
            let mut worse = base_m;
            worse[1][0] = (base_m[1][0] as f64 * scale) as u64;
            worse[1][1] = (base_m[1][1] as f64 * scale) as u64;
            let stats2 = DecoyBlockStats::from_cells(n, worse, 2_000_000_000, 2.4);
            let res = onedecoy_key_length(&stats2, &deployed_params()).unwrap();
            assert!(res.secret_bits <= prev, "scale {scale}: {} > {prev}", res.secret_bits);
            prev = res.secret_bits;
        }
    }

    #[test]
    fn onedecoy_scaling_counts_never_hurts() {
        let n = [[36_722u64, 13_287], [62_414, 22_585]];
        let m = [[654u64, 236], [1_666, 603]];
        let mut prev = 0u64;
        for c in [1u64, 2, 4, 8] {
            let ns = n.map(|row| row.map(|v| v * c));
            let ms = m.map(|row| row.map(|v| v * c));
            let stats = DecoyBlockStats::from_cells(ns, ms, 2_000_000_000 * c, 2.4 * c as f64);
            let res = onedecoy_key_length(&stats, &deployed_params()).unwrap();
            assert!(res.secret_bits >= prev, "{} < {prev} at c={c}", res.secret_bits);
            assert!(res.secret_bits <= stats.n_basis(Basis::Z));
            prev = res.secret_bits;
        }
    }

    #[test]
    fn gamma_positive_and_decreasing_in_eps() {
        let mut rng = crate::rng::StreamRng::new(99);
        for _ in 0..200 {
            let b = rng.f64() * 0.49 + 1e-4;
            let c = rng.f64() * 1e5 + 10.0;
            let d = rng.f64() * 1e5 + 10.0;
            let g_loose = gamma(1e-6, b, c, d);
            let g_tight = gamma(1e-12, b, c, d);
            assert!(g_loose >= 0.0);
            assert!(g_tight >= g_loose, "{g_tight} < {g_loose}");
        }
    }

    #[test]
    fn bbm92_abort_above_tolerance() {
        let p = Bbm92Params {
            eps_sec: 1e-10,
            eps_cor: 1e-10,
            q_tol: 0.10,
            f_ec: 1.1,
        };
        let res = bbm92_key_length(80_000, 80_000, 0.06, 0.11, &p).unwrap();
        assert!(res.aborted);
        assert_eq!(res.secret_bits, 0);
        let ok = bbm92_key_length(80_000, 80_000, 0.06, 0.06, &p).unwrap();
        assert!(!ok.aborted);
        assert!(ok.secret_bits > 0);
    }

    #[test]
    fn bbm92_deployed_block_ratio() {
        let p = Bbm92Params {
            eps_sec: 1e-10,
            eps_cor: 1e-10,
            q_tol: 0.10,
            f_ec: 1.1,
        };
        let res = bbm92_key_length(80_000, 80_000, 0.06, 0.06, &p).unwrap();
        let asym = 80_000.0 * bbm92_asymptotic_fraction(0.06, 1.1).unwrap();
        let ratio = res.secret_bits as f64 / asym;
        assert!((0.6..=0.85).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn bbm92_asymptotic_limit() {
        // q = 0, n -> infinity: l / n_key -> 1.
        let p = Bbm92Params {
            eps_sec: 1e-10,
            eps_cor: 1e-10,
            q_tol: 0.10,
            f_ec: 1.0,
        };
        let mut prev = 0.0;
        for n in [100_000_000u64, 10_000_000_000, 1_000_000_000_000] {
            let res = bbm92_key_length(n, n, 0.0, 0.0, &p).unwrap();
            let fraction = res.secret_bits as f64 / n as f64;
            assert!(fraction > prev, "{fraction} at n={n}");
            prev = fraction;
        }
        assert!(prev > 0.9995, "{prev}");
        assert!(bbm92_key_length(0, 10, 0.0, 0.0, &p).is_err());
    }

    #[test]
    fn bbm92_nu_zero_matches_asymptotic_fraction() {
        // With the fluctuation and constant terms removed the finite formula
        // must land on n_key * asymptotic fraction to within one bit.
        let p = Bbm92Params {
            eps_sec: 1e-10,
            eps_cor: 1e-10,
            q_tol: 0.10,
            f_ec: 1.1,
        };
        let n_key = 123_456u64;
        for q in [0.0, 0.01, 0.03, 0.06, 0.09] {
            let h = binary_entropy(q).unwrap();
            let manual = n_key as f64 * (1.0 - h) - p.f_ec * n_key as f64 * h;
            let asym = n_key as f64 * bbm92_asymptotic_fraction(q, p.f_ec).unwrap();
            assert!((manual - asym).abs() <= 1.0, "q={q}: {manual} vs {asym}");
        }
    }

    #[test]
    fn asymptotic_fraction_values() {
        close(bbm92_asymptotic_fraction(0.0, 1.0).unwrap(), 1.0, 0.0);
        close(
            bbm92_asymptotic_fraction(0.06, 1.0).unwrap(),
            0.34511016169104747,
            1e-12,
        );
        // The f_ec = 1 threshold sits at q = 0.110028; just above it the
        // fraction clamps to zero, just below it stays barely positive.
        close(
            bbm92_asymptotic_fraction(0.11, 1.0).unwrap(),
            0.0001680836709440081,
            1e-12,
        );
        assert_eq!(bbm92_asymptotic_fraction(0.115, 1.0).unwrap(), 0.0);
        assert_eq!(bbm92_asymptotic_fraction(0.11, 1.1).unwrap(), 0.0);
    }

    #[test]
    fn hd_fraction_values() {
        close(hd_secret_fraction(4, 0.0, 0.0).unwrap(), 2.0, 0.0);
        close(
            hd_secret_fraction(4, 0.041, 0.055).unwrap(),
            1.2937167254096509,
            1e-12,
        );
        for e in [0.0, 0.02, 0.05, 0.1] {
            let two_dim = hd_secret_fraction(2, e, e).unwrap();
            let bb84 = (1.0 - 2.0 * binary_entropy(e).unwrap()).max(0.0);
            close(two_dim, bb84, 1e-12);
        }
        assert!(hd_secret_fraction(4, 0.8, 0.0).is_err());
    }
}
