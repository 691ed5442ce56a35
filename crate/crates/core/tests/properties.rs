//! Property tests over randomly drawn parameters.

use proptest::prelude::*;

use qkdsim_core::channel::{
    bin_transmissions, db_to_transmission, rytov_variance, transmission_to_db, FadingModel,
    ScintillationParams,
};
use qkdsim_core::keyrate::cv::holevo_g;
use qkdsim_core::keyrate::dv::{binary_entropy, d_dim_entropy, hoeffding_delta};
use qkdsim_core::rng::StreamRng;

proptest! {
    #[test]
    fn db_roundtrip_is_identity(loss in 0.0f64..60.0) {
        let t = db_to_transmission(loss);
        let back = transmission_to_db(t);
        prop_assert!((back - loss).abs() <= 1e-12 * loss.max(1.0));
    }

    #[test]
    fn rytov_strictly_monotone(
        cn2 in 1e-17f64..1e-13,
        wavelength in 500e-9f64..2000e-9,
        path in 100.0f64..20_000.0,
    ) {
        let base = rytov_variance(&ScintillationParams { cn2, wavelength, path_length: path }).unwrap();
        let more_turb = rytov_variance(&ScintillationParams { cn2: cn2 * 1.5, wavelength, path_length: path }).unwrap();
        let longer = rytov_variance(&ScintillationParams { cn2, wavelength, path_length: path * 1.5 }).unwrap();
        // shorter wavelength scintillates harder
        let bluer = rytov_variance(&ScintillationParams { cn2, wavelength: wavelength / 1.5, path_length: path }).unwrap();
        prop_assert!(more_turb > base);
        prop_assert!(longer > base);
        prop_assert!(bluer > base);
    }

    #[test]
    fn fading_samples_stay_in_unit_interval(
        mean in 0.01f64..1.0,
        sigma in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let model = FadingModel::new(mean, sigma).unwrap();
        let mut rng = StreamRng::new(seed);
        for _ in 0..64 {
            let t = model.sample(&mut rng);
            prop_assert!(t > 0.0 && t <= 1.0);
        }
    }

    #[test]
    fn histogram_conserves_mass(samples in prop::collection::vec(0.0f64..=1.0, 1..300), width in 0.001f64..1.0) {
        let hist = bin_transmissions(&samples, width).unwrap();
        prop_assert_eq!(hist.total_samples, samples.len() as u64);
        prop_assert_eq!(hist.bins.iter().map(|(_, c)| *c).sum::<u64>(), hist.total_samples);
        // contiguous edges, multiples of width
        for w in hist.bins.windows(2) {
            prop_assert!((w[1].0 - w[0].0 - width).abs() < 1e-9);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        prop_assert!((hist.weighted_mean() - mean).abs() <= width / 2.0 + 1e-12);
    }

    #[test]
    fn entropy_bounds(x in 0.0f64..=1.0) {
        let h = binary_entropy(x).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        let h4 = d_dim_entropy(x, 4).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&h4));
    }

    #[test]
    fn hoeffding_monotone(n in 1u64..1_000_000, eps_exp in 1.0f64..15.0) {
        let eps = 10f64.powf(-eps_exp);
        prop_assert!(hoeffding_delta(n + 100, eps) > hoeffding_delta(n, eps));
        prop_assert!(hoeffding_delta(n, eps / 10.0) > hoeffding_delta(n, eps));
    }

    #[test]
    fn holevo_g_monotone(x in 0.0f64..100.0) {
        let g = holevo_g(x).unwrap();
        let g2 = holevo_g(x + 0.5).unwrap();
        prop_assert!(g2 > g);
        prop_assert!(g >= 0.0);
    }
}
