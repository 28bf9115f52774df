//! Randomized invariants.

use mnar_ssl::format::{read_dataset, write_dataset};
use mnar_ssl::mcartest::chi2_sf;
use mnar_ssl::mechanism::{moment_estimator, ClassPrior};
use mnar_ssl::risk::{adaptive_threshold, cc_risk, debiased_ssl_risk, ipw_risk, RiskConfig};
use mnar_ssl::scenario::geometric_counts;
use mnar_ssl::{Architecture, Dataset, Mechanism, ModelParams};
use proptest::prelude::*;

fn dataset(k: usize) -> impl Strategy<Value = Dataset> {
    (1usize..4, 2usize..30).prop_flat_map(move |(d, n)| {
        (
            proptest::collection::vec(-5.0f64..5.0, n * d),
            proptest::collection::vec(proptest::option::of(0..k), n),
        )
            .prop_filter_map("needs a labeled sample", move |(x, mut y)| {
                y[0].get_or_insert(0);
                Dataset::from_labels(x, d, y, k).ok()
            })
    })
}

fn linear(ds: &Dataset, seed: u64) -> ModelParams {
    ModelParams::random(
        Architecture::LinearSoftmax,
        ds.dim(),
        ds.n_classes(),
        &mut mnar_ssl::rng::seeded(seed),
    )
}

proptest! {
    #[test]
    fn chi2_sf_is_a_decreasing_probability(x in 0.0f64..200.0, dx in 0.01f64..5.0, d in 1usize..30) {
        let (a, b) = (chi2_sf(x, d), chi2_sf(x + dx, d));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b < a || a == 0.0);
        prop_assert!(chi2_sf(x, d + 1) >= a);
    }

    #[test]
    fn adaptive_threshold_is_capped_and_monotone(phi in proptest::collection::vec(0.01f64..1.0, 2..8), tau in 0.1f64..1.0, beta in 0.0f64..4.0) {
        let t = adaptive_threshold(&phi, tau, beta);
        let max = phi.iter().copied().fold(0.0, f64::max);
        for (i, (&p, &ti)) in phi.iter().zip(&t).enumerate() {
            prop_assert!(ti <= tau + 1e-15);
            if p == max {
                prop_assert_eq!(ti, tau);
            }
            for (&q, &tj) in phi.iter().zip(&t).skip(i + 1) {
                if p <= q {
                    prop_assert!(ti <= tj + 1e-15);
                }
            }
        }
    }

    #[test]
    fn moment_estimate_is_clamped_rate_over_prior(ds in dataset(3)) {
        let est = moment_estimator(&ds, &ClassPrior::uniform(3)).unwrap();
        let counts = ds.labeled_counts();
        for (c, &phi) in est.phi.as_slice().iter().enumerate() {
            let raw = counts[c] as f64 / ds.n() as f64 * 3.0;
            prop_assert!((est.raw[c] - raw).abs() < 1e-12);
            prop_assert!((phi - raw.clamp(1e-3, 1.0 - 1e-3)).abs() < 1e-15);
        }
    }

    #[test]
    fn ipw_at_unit_mechanism_on_complete_data_is_complete_case(ds in dataset(2), seed in 0u64..1000) {
        let labels: Vec<Option<usize>> = ds.labels().iter().enumerate().map(|(i, y)| y.or(Some(i % 2))).collect();
        let full = Dataset::from_labels(ds.features().to_vec(), ds.dim(), labels, 2).unwrap();
        let theta = linear(&full, seed);
        let one = Mechanism::new(vec![1.0, 1.0]).unwrap();
        let a = ipw_risk(&theta, &full, &one).unwrap();
        let b = cc_risk(&theta, &full).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * b.max(1.0));
    }

    #[test]
    fn debiased_without_regularization_is_ipw(ds in dataset(3), seed in 0u64..1000, phi in proptest::collection::vec(0.05f64..1.0, 3)) {
        let theta = linear(&ds, seed);
        let mech = Mechanism::new(phi).unwrap();
        let config = RiskConfig { lambda: 0.0, ..RiskConfig::default() };
        let a = debiased_ssl_risk(&theta, &ds, &mech, &config).unwrap().0;
        let b = ipw_risk(&theta, &ds, &mech).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * b.max(1.0));
    }

    #[test]
    fn geometric_counts_decay_from_n1(n1 in 1usize..5000, gamma in 1.0f64..50.0, k in 2usize..12) {
        let c = geometric_counts(n1, gamma, k).unwrap();
        prop_assert_eq!(c.len(), k);
        prop_assert_eq!(c[0], n1);
        prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(c.iter().all(|&v| v >= 1));
        let last = (n1 as f64 / gamma).round().max(1.0) as usize;
        prop_assert!(c[k - 1].abs_diff(last) <= 1);
    }

    #[test]
    fn dataset_file_round_trips(ds in dataset(4)) {
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
