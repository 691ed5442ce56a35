//! Physical-channel models: fiber and free-space segments, composite links,
//! turbulence statistics, and fading-transmission histograms.

use thiserror::Error;

use crate::rng::StreamRng;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("{what} must be strictly positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("fading model only valid on free-space segments")]
    FadingOnNonFso,
    #[error("histogram bin width must lie in (0, 1], got {0}")]
    BadBinWidth(f64),
    #[error("transmission sample {0} outside [0, 1]")]
    SampleOutOfRange(f64),
}

/// Converts a loss budget in dB to a transmission fraction, `10^(-loss/10)`.
///
/// Negative losses (gain) are accepted so that test fixtures can express
/// amplified paths; callers that forbid gain should check the result > 1.
pub fn db_to_transmission(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// Inverse of [`db_to_transmission`].
pub fn transmission_to_db(transmission: f64) -> f64 {
    -10.0 * transmission.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Fiber,
    Fso,
    /// Lumped insertion loss (couplers, switches); zero length.
    Component,
}

/// Statistical model of a fluctuating free-space transmission.
///
/// The distribution is a log-normal with parameters chosen so that its mean
/// equals `mean_transmission` and its variance `scintillation_index *
/// mean_transmission^2`, truncated at 1 with the excess mass renormalized
/// (by rejection).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FadingModel {
    pub mean_transmission: f64,
    /// Scintillation index sigma_I^2 (normalized intensity variance).
    pub scintillation_index: f64,
    pub distribution: FadingDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FadingDistribution {
    #[default]
    LogNormal,
}

impl FadingModel {
    pub fn new(mean_transmission: f64, scintillation_index: f64) -> Result<Self, ChannelError> {
        if !(mean_transmission > 0.0 && mean_transmission <= 1.0) {
            return Err(ChannelError::OutOfRange {
                what: "mean_transmission",
                value: mean_transmission,
            });
        }
        if !(scintillation_index >= 0.0) {
            return Err(ChannelError::OutOfRange {
                what: "scintillation_index",
                value: scintillation_index,
            });
        }
        Ok(Self {
            mean_transmission,
            scintillation_index,
            distribution: FadingDistribution::LogNormal,
        })
    }

    /// Draws one transmission value in `(0, 1]`.
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        if self.scintillation_index == 0.0 {
            return self.mean_transmission;
        }
        // Log-normal moment matching: sigma_ln^2 = ln(1 + sigma_I^2),
        // mu_ln = ln(mean) - sigma_ln^2 / 2.
        let sigma_ln2 = (1.0 + self.scintillation_index).ln();
        let mu_ln = self.mean_transmission.ln() - sigma_ln2 / 2.0;
        let sigma_ln = sigma_ln2.sqrt();
        loop {
            let t = (mu_ln + sigma_ln * standard_normal(rng)).exp();
            if t <= 1.0 {
                return t;
            }
        }
    }
}

/// One Box-Muller normal deviate; the partner deviate is discarded so the
/// stream stays a simple counter.
fn standard_normal(rng: &mut StreamRng) -> f64 {
    let u1 = loop {
        let u = rng.f64();
        if u > 0.0 {
            break u;
        }
    };
    let u2 = rng.f64();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Atmospheric turbulence inputs for the Rytov variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScintillationParams {
    /// Refractive-index structure constant, m^(-2/3).
    pub cn2: f64,
    /// Optical wavelength, meters.
    pub wavelength: f64,
    /// Propagation path length, meters.
    pub path_length: f64,
}

/// Plane-wave Rytov variance `1.23 * Cn^2 * (2π/λ)^(7/6) * L^(11/6)`.
pub fn rytov_variance(p: &ScintillationParams) -> Result<f64, ChannelError> {
    for (what, value) in [
        ("cn2", p.cn2),
        ("wavelength", p.wavelength),
        ("path_length", p.path_length),
    ] {
        if !(value > 0.0) {
            return Err(ChannelError::NonPositive { what, value });
        }
    }
    let k = std::f64::consts::TAU / p.wavelength;
    Ok(1.23 * p.cn2 * k.powf(7.0 / 6.0) * p.path_length.powf(11.0 / 6.0))
}

/// Maps a Rytov variance to a scintillation index, saturating at 1 so that
/// strong-turbulence inputs stay well-defined.
pub fn scintillation_index_from_rytov(rytov: f64) -> f64 {
    rytov.min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSegment {
    pub kind: SegmentKind,
    /// Physical length, meters (0 for lumped components).
    pub length: f64,
    /// Loss budget, dB (>= 0).
    pub loss: f64,
    /// Fading statistics; free-space segments only.
    pub fading: Option<FadingModel>,
}

impl ChannelSegment {
    pub fn fiber(length: f64, loss: f64) -> Self {
        Self {
            kind: SegmentKind::Fiber,
            length,
            loss,
            fading: None,
        }
    }

    pub fn component(loss: f64) -> Self {
        Self {
            kind: SegmentKind::Component,
            length: 0.0,
            loss,
            fading: None,
        }
    }

    pub fn fso(length: f64, loss: f64) -> Self {
        Self {
            kind: SegmentKind::Fso,
            length,
            loss,
            fading: None,
        }
    }

    /// Free-space segment whose transmission fluctuates with the given
    /// scintillation index around the mean implied by `loss`.
    pub fn fso_fading(length: f64, loss: f64, scintillation_index: f64) -> Result<Self, ChannelError> {
        let fading = FadingModel::new(db_to_transmission(loss), scintillation_index)?;
        Ok(Self {
            kind: SegmentKind::Fso,
            length,
            loss,
            fading: Some(fading),
        })
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.loss >= 0.0) {
            return Err(ChannelError::OutOfRange {
                what: "segment loss",
                value: self.loss,
            });
        }
        if !(self.length >= 0.0) {
            return Err(ChannelError::OutOfRange {
                what: "segment length",
                value: self.length,
            });
        }
        if self.fading.is_some() && self.kind != SegmentKind::Fso {
            return Err(ChannelError::FadingOnNonFso);
        }
        Ok(())
    }

    pub fn mean_transmission(&self) -> f64 {
        match &self.fading {
            Some(f) => f.mean_transmission,
            None => db_to_transmission(self.loss),
        }
    }
}

/// An ordered chain of lossy segments forming one quantum channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLink {
    pub id: String,
    pub segments: Vec<ChannelSegment>,
}

impl CompositeLink {
    pub fn new(id: impl Into<String>, segments: Vec<ChannelSegment>) -> Result<Self, ChannelError> {
        let link = Self {
            id: id.into(),
            segments,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for seg in &self.segments {
            seg.validate()?;
        }
        Ok(())
    }

    /// Product of per-segment mean transmissions; the empty link is lossless.
    pub fn mean_transmission(&self) -> f64 {
        self.segments.iter().map(|s| s.mean_transmission()).product()
    }

    pub fn has_fading(&self) -> bool {
        self.segments.iter().any(|s| s.fading.is_some())
    }

    /// One instantaneous transmission draw; fixed segments contribute their
    /// mean, fading segments a fresh sample.
    pub fn sample_transmission(&self, rng: &mut StreamRng) -> f64 {
        self.segments
            .iter()
            .map(|s| match &s.fading {
                Some(f) => f.sample(rng),
                None => db_to_transmission(s.loss),
            })
            .product()
    }
}

/// Empirical fading statistics as fixed-width sub-channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionHistogram {
    pub bin_width: f64,
    /// Contiguous bins as `(lower_edge, count)`; edges are multiples of
    /// `bin_width`.
    pub bins: Vec<(f64, u64)>,
    pub total_samples: u64,
}

impl TransmissionHistogram {
    pub fn bin_center(&self, index: usize) -> f64 {
        self.bins[index].0 + self.bin_width / 2.0
    }

    /// Mean reconstructed from bin centers and populations.
    pub fn weighted_mean(&self) -> f64 {
        if self.total_samples == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .enumerate()
            .map(|(i, (_, c))| self.bin_center(i) * *c as f64)
            .sum::<f64>()
            / self.total_samples as f64
    }

    /// Indices of the `n` most populated bins, ordered by descending count
    /// (ties broken by ascending edge, so selection is deterministic).
    pub fn most_populated(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.bins.len()).filter(|&i| self.bins[i].1 > 0).collect();
        order.sort_by(|&a, &b| self.bins[b].1.cmp(&self.bins[a].1).then(a.cmp(&b)));
        order.truncate(n);
        order
    }

    /// Indices of populated bins in edge order.
    pub fn populated(&self) -> Vec<usize> {
        (0..self.bins.len()).filter(|&i| self.bins[i].1 > 0).collect()
    }
}

/// Bins transmission samples into sub-channels of the given width.
///
/// Sample `s` lands in bin `floor(s / width)`; the exact top edge `s = 1`
/// is folded into the last in-range bin so the support stays within [0, 1].
pub fn bin_transmissions(samples: &[f64], width: f64) -> Result<TransmissionHistogram, ChannelError> {
    if !(width > 0.0 && width <= 1.0) {
        return Err(ChannelError::BadBinWidth(width));
    }
    if samples.is_empty() {
        return Ok(TransmissionHistogram {
            bin_width: width,
            bins: Vec::new(),
            total_samples: 0,
        });
    }
    let max_index = (1.0 / width).ceil() as usize - 1;
    let mut lo = usize::MAX;
    let mut hi = 0usize;
    let mut indices = Vec::with_capacity(samples.len());
    for &s in samples {
        if !(0.0..=1.0).contains(&s) {
            return Err(ChannelError::SampleOutOfRange(s));
        }
        let idx = ((s / width) as usize).min(max_index);
        lo = lo.min(idx);
        hi = hi.max(idx);
        indices.push(idx);
    }
    let mut bins: Vec<(f64, u64)> = (lo..=hi).map(|i| (i as f64 * width, 0)).collect();
    for idx in indices {
        bins[idx - lo].1 += 1;
    }
    Ok(TransmissionHistogram {
        bin_width: width,
        bins,
        total_samples: samples.len() as u64,
    })
}

/// Atmospheric observation attached to reports as metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvironmentRecord {
    pub timestamp: f64,
    pub cn2: f64,
    pub solar_irradiance: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn db_conversion_known_points() {
        close(db_to_transmission(20.3), 0.009332543007969915, 1e-12);
        close(db_to_transmission(0.0), 1.0, 0.0);
        close(db_to_transmission(3.0103), 0.5, 1e-6);
        // gain case stays total
        assert!(db_to_transmission(-3.0) > 1.0);
    }

    #[test]
    fn db_roundtrip_identity() {
        for &loss in &[0.0, 0.01, 3.0, 20.3, 47.5] {
            let t = db_to_transmission(loss);
            close(transmission_to_db(t), loss, 1e-12 * loss.max(1.0));
        }
    }

    #[test]
    fn composite_mean_is_segment_product() {
        let link = CompositeLink::new(
            "fiber12",
            vec![
                ChannelSegment::fiber(300.0, transmission_to_db(0.98)),
                ChannelSegment::fiber(685.0, transmission_to_db(0.79)),
            ],
        )
        .unwrap();
        close(link.mean_transmission(), 0.7742, 1e-12);
        let empty = CompositeLink::new("empty", vec![]).unwrap();
        close(empty.mean_transmission(), 1.0, 0.0);
        let fwf = CompositeLink::new("fwf", vec![ChannelSegment::fso(1660.0, 20.3)]).unwrap();
        close(fwf.mean_transmission(), 0.009332543007969915, 1e-12);
    }

    #[test]
    fn composite_mean_order_invariant() {
        let a = ChannelSegment::fiber(1.0, 1.3);
        let b = ChannelSegment::fso(2.0, 7.9);
        let c = ChannelSegment::component(0.6);
        let fwd = CompositeLink::new("f", vec![a.clone(), b.clone(), c.clone()]).unwrap();
        let rev = CompositeLink::new("r", vec![c, a, b]).unwrap();
        close(fwd.mean_transmission(), rev.mean_transmission(), 1e-15);
    }

    #[test]
    fn rytov_known_value() {
        let p = ScintillationParams {
            cn2: 1.85e-14,
            wavelength: 1550e-9,
            path_length: 1660.0,
        };
        // Independent evaluation of the formula gives 0.93275.
        close(rytov_variance(&p).unwrap(), 0.9327484437990949, 1e-9);
    }

    #[test]
    fn rytov_power_law_in_path_length() {
        let p1 = ScintillationParams {
            cn2: 3e-15,
            wavelength: 810e-9,
            path_length: 1000.0,
        };
        let mut p2 = p1;
        p2.path_length *= 2.0;
        let ratio = rytov_variance(&p2).unwrap() / rytov_variance(&p1).unwrap();
        close(ratio, 2f64.powf(11.0 / 6.0), 1e-12);
    }

    #[test]
    fn rytov_vanishes_with_turbulence() {
        let p = ScintillationParams {
            cn2: 1e-30,
            wavelength: 1550e-9,
            path_length: 1660.0,
        };
        assert!(rytov_variance(&p).unwrap() < 1e-15);
        let bad = ScintillationParams { cn2: 0.0, ..p };
        assert!(rytov_variance(&bad).is_err());
    }

    #[test]
    fn fading_degenerate_is_mean() {
        let f = FadingModel::new(0.346, 0.0).unwrap();
        let mut rng = StreamRng::new(3);
        for _ in 0..10 {
            assert_eq!(f.sample(&mut rng), 0.346);
        }
    }

    #[test]
    fn fading_sample_mean_matches_model() {
        let f = FadingModel::new(0.346, 0.1).unwrap();
        let mut rng = StreamRng::new(20260808);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let t = f.sample(&mut rng);
            assert!(t > 0.0 && t <= 1.0);
            sum += t;
            sum2 += t * t;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 0.346).abs() <= 3.0 * se,
            "mean {mean} se {se}"
        );
    }

    #[test]
    fn binning_adjacent_samples() {
        let hist = bin_transmissions(&[0.344, 0.351], 0.009).unwrap();
        assert_eq!(hist.total_samples, 2);
        assert_eq!(hist.bins.len(), 2);
        assert_eq!(hist.bins[0].1, 1);
        assert_eq!(hist.bins[1].1, 1);
        close(hist.bins[0].0, 38.0 * 0.009, 1e-12);
    }

    #[test]
    fn binning_degenerate_cases() {
        let hist = bin_transmissions(&[0.5; 17], 0.009).unwrap();
        assert_eq!(hist.bins.len(), 1);
        assert_eq!(hist.bins[0].1, 17);

        let hist = bin_transmissions(&[0.1, 0.6, 1.0], 1.0).unwrap();
        assert_eq!(hist.bins.len(), 1);
        assert_eq!(hist.bins[0].1, 3);

        let empty = bin_transmissions(&[], 0.1).unwrap();
        assert_eq!(empty.total_samples, 0);
        assert!(empty.bins.is_empty());
    }

    #[test]
    fn histogram_weighted_mean_close_to_sample_mean() {
        let f = FadingModel::new(0.346, 0.1).unwrap();
        let mut rng = StreamRng::new(5);
        let samples: Vec<f64> = (0..200_000).map(|_| f.sample(&mut rng)).collect();
        let width = 0.009;
        let hist = bin_transmissions(&samples, width).unwrap();
        assert_eq!(hist.total_samples, samples.len() as u64);
        assert_eq!(
            hist.bins.iter().map(|(_, c)| *c).sum::<u64>(),
            hist.total_samples
        );
        let sample_mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((hist.weighted_mean() - sample_mean).abs() <= width / 2.0);
    }

    #[test]
    fn fading_requires_fso() {
        let mut seg = ChannelSegment::fiber(10.0, 1.0);
        seg.fading = Some(FadingModel::new(0.5, 0.1).unwrap());
        assert_eq!(seg.validate(), Err(ChannelError::FadingOnNonFso));
    }
}
