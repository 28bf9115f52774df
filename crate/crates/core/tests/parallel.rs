//! The data-parallel reductions give the same bits on any thread count.

use mnar_ssl::mechanism::{nll_grad_phi, observed_nll};
use mnar_ssl::risk::{debiased_ssl_risk, RiskConfig};
use mnar_ssl::rng;
use mnar_ssl::scenario::{apply_mask, synth_gaussian_mixture, GaussianMixtureSpec, ScenarioKind, ScenarioSpec};
use mnar_ssl::train::{train_debiased, Evaluation, TrainConfig};
use mnar_ssl::{Architecture, Mechanism, ModelParams};

fn run() -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let spec = GaussianMixtureSpec::separated(3, 4, 2.0, 1.0, vec![1500, 1000, 500]);
    let pool = synth_gaussian_mixture(&spec, &mut rng::seeded(1)).unwrap();
    let kind = ScenarioKind::ClassBernoulli {
        phi: vec![0.8, 0.4, 0.1],
    };
    let (ds, _) = apply_mask(&pool, &ScenarioSpec::new(kind), &mut rng::seeded(2)).unwrap();
    let theta = ModelParams::random(Architecture::OneHidden { width: 8 }, 4, 3, &mut rng::seeded(3));
    let phi = Mechanism::new(vec![0.7, 0.5, 0.2]).unwrap();
    let nll = observed_nll(&theta, &phi, &ds).unwrap();
    let grad_phi = nll_grad_phi(&theta, &phi, &ds).unwrap();
    let (_, grad) = debiased_ssl_risk(&theta, &ds, &phi, &RiskConfig::default()).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: None,
        ..TrainConfig::default()
    };
    let trained = train_debiased(&ds, &theta, &config, None, &mut rng::seeded(4), Evaluation::default()).unwrap();
    (nll, grad_phi, grad.0, trained.theta.params().to_vec())
}

#[test]
fn one_thread_and_many_threads_agree_bitwise() {
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(run);
    let many = rayon::ThreadPoolBuilder::new()
        .num_threads(8)
        .build()
        .unwrap()
        .install(run);
    assert_eq!(single.0.to_bits(), many.0.to_bits());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&single.1), bits(&many.1));
    assert_eq!(bits(&single.2), bits(&many.2));
    assert_eq!(bits(&single.3), bits(&many.3));
}
