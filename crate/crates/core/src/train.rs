//! Minibatch training on the debiased (or classical) SSL risk, and
//! evaluation against sealed labels.

use serde::{Deserialize, Serialize};

use crate::batch::{BatchSampler, View};
use crate::data::{clamp_phi, ln_clamped, Dataset, Mechanism, SealedTruth};
use crate::error::{Error, Result};
use crate::mechanism::{moment_raw, prior_view, DivergenceGuard, DEFAULT_EPS_PHI};
use crate::model::{argmax, ModelParams};
use crate::risk::{debiased_through_prior_view, risk_view, RiskConfig, Weights};
use crate::rng::Rng;

/// Where the mechanism used by the debiased risk comes from when none is
/// supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismSource {
    /// A mechanism must be passed to [`train_debiased`].
    Fixed,
    /// `n_l / n` for every class.
    Mcar,
    /// Moment estimator under a known class prior, computed once.
    MomentPrior { prior: Vec<f64> },
    /// Moment estimator under a moving average of the model's batch priors;
    /// no gradient flows through the mechanism.
    MomentBuffered {
        #[serde(default = "default_buffer_momentum")]
        momentum: f64,
    },
    /// Moment estimator under the model's batch prior, differentiated
    /// through.
    MomentGradient,
}

fn default_buffer_momentum() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Debiased,
    /// The classical SSL risk; the mechanism is only tracked for reporting.
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per labeled and per unlabeled batch; `None` uses the full data.
    pub batch_size: Option<usize>,
    pub gamma_theta: f64,
    /// Heavy-ball momentum of the SGD update; `0` is plain SGD.
    pub momentum: f64,
    pub objective: Objective,
    pub mechanism: MechanismSource,
    pub risk: RiskConfig,
    pub eps_phi: f64,
    /// Evaluate on the test split every this many epochs; `0` only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: Some(64),
            gamma_theta: 0.1,
            momentum: 0.0,
            objective: Objective::Debiased,
            mechanism: MechanismSource::MomentBuffered { momentum: 0.99 },
            risk: RiskConfig::default(),
            eps_phi: DEFAULT_EPS_PHI,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        if !(self.gamma_theta > 0.0) {
            return Err(Error::invalid("gamma_theta must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.eps_phi > 0.0 && self.eps_phi < 0.5) {
            return Err(Error::invalid("eps_phi must lie in (0, 0.5)"));
        }
        if let MechanismSource::MomentBuffered { momentum } = self.mechanism {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::invalid("buffer momentum must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Held-out data and known truths used for reporting only.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evaluation<'a> {
    pub test: Option<(&'a Dataset, &'a SealedTruth)>,
    pub phi_star: Option<&'a [f64]>,
}

/// One epoch of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    /// Full-data value of the training objective at the epoch's mechanism.
    pub objective: f64,
    pub phi: Vec<f64>,
    pub phi_mse: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean negative log-likelihood of the true labels.
    pub test_loss: Option<f64>,
    pub phi_mse: Option<f64>,
    pub curves: Vec<CurveRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub theta: ModelParams,
    pub phi: Mechanism,
    pub report: MetricsReport,
}

/// `||phi_hat - phi_star||^2 / ||phi_star||^2`.
pub fn normalized_phi_mse(phi_hat: &[f64], phi_star: &[f64]) -> Result<f64> {
    if phi_hat.len() != phi_star.len() {
        return Err(Error::DimensionMismatch {
            what: "mechanism",
            expected: phi_star.len(),
            actual: phi_hat.len(),
        });
    }
    let denom: f64 = phi_star.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::invalid("reference mechanism is zero"));
    }
    let num: f64 = phi_hat.iter().zip(phi_star).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(num / denom)
}

/// Accuracy, per-class accuracy and mean NLL against the sealed labels.
pub fn evaluate(theta: &ModelParams, test: &Dataset, truth: &SealedTruth) -> Result<MetricsReport> {
    theta.check_dataset(test)?;
    if truth.n() != test.n() || truth.n_classes() != test.n_classes() {
        return Err(Error::invalid("sealed truth does not match the test set"));
    }
    if test.n() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    let k = test.n_classes();
    let probs = theta.predict_all(test);
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    let mut loss = 0.0;
    for (i, &y) in truth.labels().iter().enumerate() {
        let p = &probs[i * k..(i + 1) * k];
        total[y] += 1;
        if argmax(p) == y {
            correct[y] += 1;
        }
        loss -= ln_clamped(p[y]);
    }
    let n = test.n() as f64;
    Ok(MetricsReport {
        accuracy: Some(correct.iter().sum::<usize>() as f64 / n),
        per_class_accuracy: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
        test_loss: Some(loss / n),
        phi_mse: None,
        curves: Vec::new(),
    })
}

/// Mechanism state carried across steps.
enum PhiState {
    Fixed(Vec<f64>),
    Buffered {
        buffer: Vec<f64>,
        momentum: f64,
        phi: Vec<f64>,
    },
    ThroughPrior(Vec<f64>),
}

impl PhiState {
    fn current(&self) -> &[f64] {
        match self {
            PhiState::Fixed(p) | PhiState::ThroughPrior(p) => p,
            PhiState::Buffered { phi, .. } => phi,
        }
    }
}

/// Trains theta by minibatch gradient descent on the configured risk.
///
/// Each step draws one batch of labeled and one batch of unlabeled samples.
/// A supplied `phi_input` is used as a fixed mechanism; otherwise the
/// configured [`MechanismSource`] provides it. The buffered source updates
/// its class-prior buffer from the batch before every step.
pub fn train_debiased(
    ds: &Dataset,
    theta0: &ModelParams,
    config: &TrainConfig,
    phi_input: Option<&Mechanism>,
    rng: &mut Rng,
    eval: Evaluation,
) -> Result<TrainOutcome> {
    config.validate()?;
    theta0.check_dataset(ds)?;
    ds.validate()?;
    let k = ds.n_classes();
    let counts = ds.labeled_counts();
    let eps = config.eps_phi;
    let moment = |prior: &[f64]| clamp_phi(&moment_raw(&counts, ds.n(), prior), eps);

    let mut state = match (phi_input, &config.mechanism) {
        (Some(phi), _) => {
            if phi.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "mechanism",
                    expected: k,
                    actual: phi.len(),
                });
            }
            PhiState::Fixed(phi.as_slice().to_vec())
        }
        (None, MechanismSource::Fixed) => {
            return Err(Error::invalid("a fixed mechanism source requires a supplied mechanism"));
        }
        (None, MechanismSource::Mcar) => PhiState::Fixed(vec![ds.labeled_fraction(); k]),
        (None, MechanismSource::MomentPrior { prior }) => {
            let prior = crate::mechanism::ClassPrior::user(prior.clone())?;
            if prior.p.len() != k || prior.p.iter().any(|&v| v <= 0.0) {
                return Err(Error::invalid("known prior must have one positive entry per class"));
            }
            PhiState::Fixed(moment(&prior.p))
        }
        (None, MechanismSource::MomentBuffered { momentum }) => {
            let buffer = prior_view(theta0, &View::full(ds));
            let phi = moment(&buffer);
            PhiState::Buffered {
                buffer,
                momentum: *momentum,
                phi,
            }
        }
        (None, MechanismSource::MomentGradient) => PhiState::ThroughPrior(moment(&prior_view(theta0, &View::full(ds)))),
    };

    let mut theta = theta0.clone();
    let mut velocity = vec![0.0; theta.n_params()];
    let mut sampler = BatchSampler::new(ds, config.batch_size);
    let mut guard = DivergenceGuard::default();
    let mut curves = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        sampler.start_epoch(rng);
        for _ in 0..sampler.steps_per_epoch() {
            let (lab, unl) = sampler.next_batch(rng);
            let view = View::batch(ds, lab, unl);
            let grad = match config.objective {
                Objective::Classical => {
                    if let PhiState::Buffered { .. } = state {
                        update_buffer(&mut state, &theta, &view, &moment);
                    }
                    risk_view(&theta, &view, &Weights::classical(&view, &config.risk)).1
                }
                Objective::Debiased => match &mut state {
                    PhiState::ThroughPrior(phi) => {
                        let (_, g, p) = debiased_through_prior_view(&theta, &view, &config.risk, eps);
                        *phi = p;
                        g
                    }
                    _ => {
                        update_buffer(&mut state, &theta, &view, &moment);
                        let phi = state.current();
                        let th = config.risk.thresholds(phi);
                        risk_view(
                            &theta,
                            &view,
                            &Weights::debiased(&view, phi, &config.risk, th.as_deref()),
                        )
                        .1
                    }
                },
            };
            for ((p, v), g) in theta.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= config.gamma_theta * *v;
            }
        }

        if let PhiState::ThroughPrior(phi) = &mut state {
            *phi = moment(&prior_view(&theta, &View::full(ds)));
        }
        let phi = state.current().to_vec();
        let objective = full_objective(&theta, ds, &phi, config);
        let evaluate_now = config.eval_every > 0 && epoch % config.eval_every == 0 || epoch == config.epochs;
        let test = match (evaluate_now, eval.test) {
            (true, Some((t, truth))) => Some(evaluate(&theta, t, truth)?),
            _ => None,
        };
        curves.push(CurveRow {
            epoch,
            objective,
            phi_mse: eval.phi_star.map(|s| normalized_phi_mse(&phi, s)).transpose()?,
            phi,
            test_accuracy: test.as_ref().and_then(|m| m.accuracy),
            test_loss: test.as_ref().and_then(|m| m.test_loss),
        });
        guard.record("train", epoch, objective)?;
    }

    let phi = state.current().to_vec();
    let mut report = match eval.test {
        Some((t, truth)) => evaluate(&theta, t, truth)?,
        None => MetricsReport {
            accuracy: None,
            per_class_accuracy: vec![None; k],
            test_loss: None,
            phi_mse: None,
            curves: Vec::new(),
        },
    };
    report.phi_mse = eval.phi_star.map(|s| normalized_phi_mse(&phi, s)).transpose()?;
    report.curves = curves;
    Ok(TrainOutcome {
        theta,
        phi: Mechanism::new(phi)?,
        report,
    })
}

fn update_buffer(state: &mut PhiState, theta: &ModelParams, view: &View, moment: &impl Fn(&[f64]) -> Vec<f64>) {
    if let PhiState::Buffered { buffer, momentum, phi } = state {
        let batch = prior_view(theta, view);
        let mu = *momentum;
        let mut next: Vec<f64> = buffer
            .iter()
            .zip(&batch)
            .map(|(b, q)| mu * b + (1.0 - mu) * q)
            .collect();
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        *phi = moment(&next);
        *buffer = next;
    }
}

fn full_objective(theta: &ModelParams, ds: &Dataset, phi: &[f64], config: &TrainConfig) -> f64 {
    let view = View::full(ds);
    let w = match config.objective {
        Objective::Classical => Weights::classical(&view, &config.risk),
        Objective::Debiased => {
            let th = config.risk.thresholds(phi);
            return risk_view(
                theta,
                &view,
                &Weights::debiased(&view, phi, &config.risk, th.as_deref()),
            )
            .0;
        }
    };
    risk_view(theta, &view, &w).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::Buffer;
    use crate::mechanism::ClassPrior;
    use crate::model::Architecture;
    use crate::rng;
    use crate::scenario::{apply_mask, synth_gaussian_mixture, GaussianMixtureSpec, ScenarioKind, ScenarioSpec};

    fn problem(phi: Vec<f64>, seed: u64, separation: f64) -> (Dataset, SealedTruth, Dataset, SealedTruth) {
        let mut r = rng::seeded(seed);
        let spec = GaussianMixtureSpec::separated(2, 2, separation, 1.0, vec![300, 300]);
        let pool = synth_gaussian_mixture(&spec, &mut r).unwrap();
        let (train, truth) =
            apply_mask(&pool, &ScenarioSpec::new(ScenarioKind::ClassBernoulli { phi }), &mut r).unwrap();
        let test_spec = GaussianMixtureSpec {
            counts: vec![200, 200],
            ..spec
        };
        let test = synth_gaussian_mixture(&test_spec, &mut r).unwrap();
        let test_truth = SealedTruth::from_complete(&test).unwrap();
        (train, truth, test, test_truth)
    }

    #[test]
    fn normalized_mse_cases() {
        assert_eq!(normalized_phi_mse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!((normalized_phi_mse(&[0.6, 0.8], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_phi_mse(&[0.5, 0.5], &[1.0, 0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert!(normalized_phi_mse(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn evaluate_hand_counts() {
        // theta predicts class 1 iff x > 0
        let theta = ModelParams::from_vec(Architecture::LinearSoftmax, 1, 2, vec![-5.0, 5.0, 0.0, 0.0]).unwrap();
        let test = Dataset::fully_labeled(vec![-1.0, -2.0, 1.0, 3.0, 0.5], 1, vec![0, 1, 1, 1, 0], 2).unwrap();
        let truth = SealedTruth::from_complete(&test).unwrap();
        let m = evaluate(&theta, &test, &truth).unwrap();
        assert_eq!(m.accuracy, Some(0.6));
        assert_eq!(m.per_class_accuracy, vec![Some(0.5), Some(2.0 / 3.0)]);
        let want: f64 = [(-5.0f64, 0), (-10.0, 1), (5.0, 1), (15.0, 1), (2.5, 0)]
            .iter()
            .map(|&(z, y)| {
                let p1 = 1.0 / (1.0 + (-2.0 * z).exp());
                -(if y == 1 { p1 } else { 1.0 - p1 }).ln()
            })
            .sum::<f64>()
            / 5.0;
        assert!((m.test_loss.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_classifier_metrics() {
        let theta = ModelParams::zeros(Architecture::LinearSoftmax, 1, 10);
        let test = Dataset::fully_labeled(vec![0.0; 20], 1, (0..20).map(|i| i % 10).collect(), 10).unwrap();
        let m = evaluate(&theta, &test, &SealedTruth::from_complete(&test).unwrap()).unwrap();
        assert!((m.test_loss.unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(m.accuracy, Some(0.1));
    }

    #[test]
    fn zero_epochs_keeps_theta() {
        let (train, _, _, _) = problem(vec![0.5, 0.5], 1, 4.0);
        let theta0 = ModelParams::random(Architecture::LinearSoftmax, 2, 2, &mut rng::seeded(2));
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_debiased(
            &train,
            &theta0,
            &config,
            None,
            &mut rng::seeded(3),
            Evaluation::default(),
        )
        .unwrap();
        assert_eq!(out.theta, theta0);
        assert!(out.report.curves.is_empty());
    }

    #[test]
    fn separable_complete_case_training() {
        let (train, _, test, test_truth) = problem(vec![0.3, 0.3], 4, 10.0);
        let theta0 = ModelParams::zeros(Architecture::LinearSoftmax, 2, 2);
        let phi = Mechanism::mcar_of(&train).unwrap();
        let config = TrainConfig {
            epochs: 10,
            risk: RiskConfig {
                lambda: 0.0,
                ..RiskConfig::default()
            },
            ..TrainConfig::default()
        };
        let eval = Evaluation {
            test: Some((&test, &test_truth)),
            phi_star: None,
        };
        let out = train_debiased(&train, &theta0, &config, Some(&phi), &mut rng::seeded(5), eval).unwrap();
        assert!(out.report.accuracy.unwrap() > 0.99);
        assert_eq!(out.report.curves.len(), 10);
    }

    #[test]
    fn deterministic_given_seed() {
        let (train, truth, test, test_truth) = problem(vec![0.8, 0.2], 6, 2.0);
        let theta0 = ModelParams::random(Architecture::OneHidden { width: 4 }, 2, 2, &mut rng::seeded(1));
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let eval = Evaluation {
            test: Some((&test, &test_truth)),
            phi_star: truth.phi_star(),
        };
        let a = train_debiased(&train, &theta0, &config, None, &mut rng::seeded(9), eval).unwrap();
        let b = train_debiased(&train, &theta0, &config, None, &mut rng::seeded(9), eval).unwrap();
        assert_eq!(a, b);
        assert!(a.report.phi_mse.is_some());
    }

    #[test]
    fn plug_in_fixed_prior_mechanism_reproduces_run() {
        let (train, _, _, _) = problem(vec![0.7, 0.3], 7, 2.0);
        let theta0 = ModelParams::random(Architecture::LinearSoftmax, 2, 2, &mut rng::seeded(1));
        let config = TrainConfig {
            epochs: 4,
            mechanism: MechanismSource::MomentPrior { prior: vec![0.5, 0.5] },
            ..TrainConfig::default()
        };
        let one = train_debiased(
            &train,
            &theta0,
            &config,
            None,
            &mut rng::seeded(2),
            Evaluation::default(),
        )
        .unwrap();
        let two = train_debiased(
            &train,
            &theta0,
            &config,
            Some(&one.phi),
            &mut rng::seeded(2),
            Evaluation::default(),
        )
        .unwrap();
        for (a, b) in one.theta.params().iter().zip(two.theta.params()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mcar_debiased_and_classical_traces_match_without_correction() {
        let (train, _, _, _) = problem(vec![0.4, 0.4], 8, 2.0);
        let theta0 = ModelParams::random(Architecture::LinearSoftmax, 2, 2, &mut rng::seeded(1));
        let base = TrainConfig {
            epochs: 5,
            mechanism: MechanismSource::Mcar,
            risk: RiskConfig {
                lambda: 0.0,
                ..RiskConfig::default()
            },
            ..TrainConfig::default()
        };
        let classical = TrainConfig {
            objective: Objective::Classical,
            ..base.clone()
        };
        let a = train_debiased(&train, &theta0, &base, None, &mut rng::seeded(3), Evaluation::default()).unwrap();
        let b = train_debiased(
            &train,
            &theta0,
            &classical,
            None,
            &mut rng::seeded(3),
            Evaluation::default(),
        )
        .unwrap();
        let ta: Vec<f64> = a.report.curves.iter().map(|c| c.objective).collect();
        let tb: Vec<f64> = b.report.curves.iter().map(|c| c.objective).collect();
        assert_eq!(ta, tb);
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn buffered_matches_public_buffer_arithmetic() {
        let (train, _, _, _) = problem(vec![0.6, 0.6], 9, 2.0);
        let theta0 = ModelParams::random(Architecture::LinearSoftmax, 2, 2, &mut rng::seeded(1));
        let config = TrainConfig {
            epochs: 1,
            batch_size: None,
            gamma_theta: 1e-300,
            mechanism: MechanismSource::MomentBuffered { momentum: 0.5 },
            ..TrainConfig::default()
        };
        let out = train_debiased(
            &train,
            &theta0,
            &config,
            None,
            &mut rng::seeded(1),
            Evaluation::default(),
        )
        .unwrap();
        let p = crate::mechanism::class_prior_from_model(&theta0, &train).unwrap();
        let b = Buffer::new(
            &ClassPrior {
                source: crate::mechanism::PriorSource::Buffered,
                ..p.clone()
            },
            0.5,
        )
        .unwrap()
        .update(&p);
        let want = moment_raw(&train.labeled_counts(), train.n(), &b.p);
        for (a, w) in out.phi.as_slice().iter().zip(&want) {
            assert!((a - w.clamp(DEFAULT_EPS_PHI, 1.0 - DEFAULT_EPS_PHI)).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_source_requires_mechanism() {
        let (train, _, _, _) = problem(vec![0.6, 0.6], 10, 2.0);
        let theta0 = ModelParams::zeros(Architecture::LinearSoftmax, 2, 2);
        let config = TrainConfig {
            mechanism: MechanismSource::Fixed,
            ..TrainConfig::default()
        };
        assert!(train_debiased(
            &train,
            &theta0,
            &config,
            None,
            &mut rng::seeded(1),
            Evaluation::default()
        )
        .is_err());
    }

    #[test]
    fn overflowing_updates_diverge() {
        let feats: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1e200 } else { -1e200 }).collect();
        let labels = (0..40).map(|i| (i % 3 == 0).then_some(i % 2)).collect();
        let train = Dataset::from_labels(feats, 1, labels, 2).unwrap();
        let theta0 = ModelParams::zeros(Architecture::LinearSoftmax, 1, 2);
        let config = TrainConfig {
            epochs: 5,
            gamma_theta: 1e200,
            mechanism: MechanismSource::Mcar,
            ..TrainConfig::default()
        };
        let err = train_debiased(
            &train,
            &theta0,
            &config,
            None,
            &mut rng::seeded(1),
            Evaluation::default(),
        )
        .unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }
}
