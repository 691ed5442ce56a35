//! Continuous-variable key-rate chain: channel-parameter estimation from
//! quadrature batches, the Gaussian-equivalent asymptotic rate under the
//! Holevo bound (entangling cloner, reverse reconciliation, trusted
//! detector), and fading-channel sub-binned aggregation.

use crate::channel::TransmissionHistogram;
use crate::sim::{CvBatch, CvConfig};

use super::KeyRateError;

/// Minimum batch size accepted by the estimator.
pub const MIN_ESTIMATION_SYMBOLS: usize = 10_000;

/// Transmission and excess-noise estimate from one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvChannelEstimate {
    /// Estimated channel transmission; may slightly exceed 1 from noise.
    pub t_hat: f64,
    /// Estimated channel-input excess noise in snu; may be slightly
    /// negative from noise. Use [`CvChannelEstimate::xi_clamped`] as
    /// key-rate input.
    pub xi_hat: f64,
    pub n_symbols: u64,
}

impl CvChannelEstimate {
    pub fn xi_clamped(&self) -> f64 {
        self.xi_hat.max(0.0)
    }
}

/// Inverts the heterodyne measurement model on a batch:
/// `t_q = cov(x_q, y_q) / var(x_q)`, `T = (2/eta) * mean_q(t_q)^2`, and
/// `xi = (2 / (T eta)) * (var(y) - 1 - v_el) - v_a` with per-quadrature
/// averages throughout.
pub fn estimate_t_xi(batch: &CvBatch, cfg: &CvConfig) -> Result<CvChannelEstimate, KeyRateError> {
    let n = batch.len();
    if n < MIN_ESTIMATION_SYMBOLS {
        return Err(KeyRateError::InsufficientSymbols(n));
    }

    let mut t_q_sum = 0.0;
    let mut var_x_sum = 0.0;
    let mut var_y_sum = 0.0;
    for q in 0..2 {
        let mean_x = batch.alice_symbols.iter().map(|x| x[q]).sum::<f64>() / n as f64;
        let mean_y = batch.bob_quadratures.iter().map(|y| y[q]).sum::<f64>() / n as f64;
        let mut var_x = 0.0;
        let mut var_y = 0.0;
        let mut cov = 0.0;
        for (x, y) in batch.alice_symbols.iter().zip(&batch.bob_quadratures) {
            let dx = x[q] - mean_x;
            let dy = y[q] - mean_y;
            var_x += dx * dx;
            var_y += dy * dy;
            cov += dx * dy;
        }
        var_x /= n as f64;
        var_y /= n as f64;
        cov /= n as f64;
        if var_x <= 0.0 {
            return Err(KeyRateError::DegenerateBatch("var(x) = 0"));
        }
        t_q_sum += cov / var_x;
        var_x_sum += var_x;
        var_y_sum += var_y;
    }
    let t_q_mean = t_q_sum / 2.0;
    let v_a_pq = var_x_sum / 2.0;
    let var_y = var_y_sum / 2.0;

    let t_hat = 2.0 / cfg.det_efficiency * t_q_mean * t_q_mean;
    if t_hat <= 0.0 {
        return Err(KeyRateError::DegenerateBatch("estimated transmission is zero"));
    }
    let xi_hat = 2.0 / (t_hat * cfg.det_efficiency) * (var_y - 1.0 - cfg.v_el) - v_a_pq;
    Ok(CvChannelEstimate {
        t_hat,
        xi_hat,
        n_symbols: n as u64,
    })
}

/// Bosonic entropy function `g(x) = (x+1) log2(x+1) - x log2 x`, `g(0) = 0`.
pub fn holevo_g(x: f64) -> Result<f64, KeyRateError> {
    if x < 0.0 {
        return Err(KeyRateError::OutOfRange {
            what: "holevo_g argument",
            value: x,
        });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok((x + 1.0) * (x + 1.0).log2() - x * x.log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    Heterodyne,
    Homodyne,
}

/// Receiver-side parameters of the Gaussian rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvRateParams {
    /// Per-quadrature modulation variance, snu.
    pub v_a: f64,
    /// Receiver quantum efficiency.
    pub eta: f64,
    /// Electronic noise, snu.
    pub v_el: f64,
    /// Reconciliation efficiency in (0, 1].
    pub beta: f64,
    pub detection: Detection,
}

impl CvRateParams {
    fn validate(&self) -> Result<(), KeyRateError> {
        if !(self.v_a > 0.0) {
            return Err(KeyRateError::OutOfRange {
                what: "v_a",
                value: self.v_a,
            });
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(KeyRateError::OutOfRange {
                what: "eta",
                value: self.eta,
            });
        }
        if !(self.v_el >= 0.0) {
            return Err(KeyRateError::OutOfRange {
                what: "v_el",
                value: self.v_el,
            });
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(KeyRateError::OutOfRange {
                what: "beta",
                value: self.beta,
            });
        }
        Ok(())
    }

    fn chi_det(&self) -> f64 {
        match self.detection {
            Detection::Heterodyne => (2.0 - self.eta + 2.0 * self.v_el) / self.eta,
            Detection::Homodyne => (1.0 - self.eta + self.v_el) / self.eta,
        }
    }
}

/// Unclamped rate together with the symplectic eigenvalues, shared by the
/// public rate and the excess-noise root finder.
fn key_fraction_raw(t: f64, xi: f64, p: &CvRateParams) -> Result<(f64, [f64; 4]), KeyRateError> {
    p.validate()?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(KeyRateError::OutOfRange {
            what: "transmission",
            value: t,
        });
    }
    if !(xi >= 0.0) {
        return Err(KeyRateError::OutOfRange {
            what: "excess noise",
            value: xi,
        });
    }

    let v = p.v_a + 1.0;
    let chi_line = (1.0 - t) / t + xi;
    let chi_det = p.chi_det();
    let chi_tot = chi_line + chi_det / t;

    let snr_term = (v + chi_tot) / (1.0 + chi_tot);
    let i_ab = match p.detection {
        Detection::Heterodyne => snr_term.log2(),
        Detection::Homodyne => 0.5 * snr_term.log2(),
    };

    let a = v * v * (1.0 - 2.0 * t) + 2.0 * t + t * t * (v + chi_line) * (v + chi_line);
    let b = t * t * (v * chi_line + 1.0) * (v * chi_line + 1.0);
    let sqrt_b = b.sqrt();
    let c = (a * chi_det + v * sqrt_b + t * (v + chi_line)) / (t * (v + chi_tot));
    let d = sqrt_b * (v + sqrt_b * chi_det) / (t * (v + chi_tot));

    let pair = |sum: f64, prod: f64| -> (f64, f64) {
        let disc = (sum * sum - 4.0 * prod).max(0.0).sqrt();
        (
            ((sum + disc) / 2.0).max(0.0).sqrt(),
            ((sum - disc) / 2.0).max(0.0).sqrt(),
        )
    };
    let (nu1, nu2) = pair(a, b);
    let (nu3, nu4) = pair(c, d);
    let nus = [nu1, nu2, nu3, nu4];
    for &nu in &nus {
        if nu < 1.0 - 1e-6 {
            return Err(KeyRateError::ModelViolation(nu));
        }
    }
    // Rounding can leave eigenvalues a hair under 1; g is clamped there.
    let g_of = |nu: f64| holevo_g(((nu - 1.0) / 2.0).max(0.0));
    let chi_be = g_of(nu1)? + g_of(nu2)? - g_of(nu3)? - g_of(nu4)?;
    Ok((p.beta * i_ab - chi_be, nus))
}

/// Asymptotic Gaussian-equivalent secret fraction in bits per symbol,
/// clamped at zero.
pub fn gaussian_key_fraction(t: f64, xi: f64, p: &CvRateParams) -> Result<f64, KeyRateError> {
    Ok(key_fraction_raw(t, xi, p)?.0.max(0.0))
}

/// Symplectic eigenvalues at the given operating point, for diagnostics.
pub fn symplectic_eigenvalues(t: f64, xi: f64, p: &CvRateParams) -> Result<[f64; 4], KeyRateError> {
    Ok(key_fraction_raw(t, xi, p)?.1)
}

/// Largest excess noise with a positive rate, found by bisection to an
/// absolute tolerance of 1e-6 snu (the bracket is tightened well below
/// that so the residual rate is within 1e-6 bits).
pub fn max_tolerable_xi(t: f64, p: &CvRateParams) -> Result<f64, KeyRateError> {
    if key_fraction_raw(t, 0.0, p)?.0 <= 0.0 {
        return Err(KeyRateError::NoPositiveRate);
    }
    let mut lo = 0.0f64;
    let mut hi = 0.1f64;
    while key_fraction_raw(t, hi, p)?.0 > 0.0 {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(KeyRateError::OutOfRange {
                what: "excess-noise bracket",
                value: hi,
            });
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if key_fraction_raw(t, mid, p)?.0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-bin estimate tied to a histogram bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinEstimate {
    pub bin_index: usize,
    pub estimate: CvChannelEstimate,
}

fn select_bins<'a>(
    hist: &TransmissionHistogram,
    per_bin: &'a [BinEstimate],
    top_n: usize,
) -> Result<Vec<(&'a BinEstimate, f64)>, KeyRateError> {
    if top_n == 0 {
        return Err(KeyRateError::EmptySelection);
    }
    let selected = hist.most_populated(top_n);
    if selected.is_empty() {
        return Err(KeyRateError::EmptySelection);
    }
    let total: u64 = selected.iter().map(|&i| hist.bins[i].1).sum();
    selected
        .iter()
        .map(|&i| {
            let est = per_bin
                .iter()
                .find(|e| e.bin_index == i)
                .ok_or(KeyRateError::MisalignedBins("selected bin has no estimate"))?;
            Ok((est, hist.bins[i].1 as f64 / total as f64))
        })
        .collect()
}

/// Population-weighted mean excess noise over the `top_n` most populated
/// sub-channels.
pub fn weighted_excess_noise(
    hist: &TransmissionHistogram,
    per_bin: &[BinEstimate],
    top_n: usize,
) -> Result<f64, KeyRateError> {
    let sel = select_bins(hist, per_bin, top_n)?;
    Ok(sel.iter().map(|(e, w)| w * e.estimate.xi_hat).sum())
}

/// Population-weighted key fraction over fixed-transmission sub-channels:
/// each selected bin contributes its own (T, xi) operating point.
pub fn fading_key_fraction(
    hist: &TransmissionHistogram,
    per_bin: &[BinEstimate],
    p: &CvRateParams,
    top_n: usize,
) -> Result<f64, KeyRateError> {
    let sel = select_bins(hist, per_bin, top_n)?;
    let mut acc = 0.0;
    for (e, w) in sel {
        let t = e.estimate.t_hat.min(1.0);
        acc += w * gaussian_key_fraction(t, e.estimate.xi_clamped(), p)?;
    }
    Ok(acc)
}
