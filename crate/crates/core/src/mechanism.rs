//! Estimation of the missing-data mechanism `phi`.
//!
//! The observed negative log-likelihood of `(x, y * r, r)`, dropping the
//! theta-free constant, is
//!
//! ```text
//! l(theta, phi) = - sum_{r_i = 1} log[ p(y_i | x_i) phi_{y_i} ]
//!                 - sum_{r_i = 0} log A_i,   A_i = sum_k p(k | x_i) (1 - phi_k)
//! ```
//!
//! It is convex in `phi` for fixed `theta`; its gradient and Hessian in
//! `phi` are available in closed form. Two estimators are provided: the
//! method of moments (labeled class counts divided by a class prior) and
//! maximum likelihood over `(theta, phi)` with a sigmoid reparametrization
//! and an augmented-Lagrangian prior-sum constraint.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::batch::{BatchSampler, View};
use crate::data::{clamp_phi, ln_clamped, Dataset, Mechanism, EPS_PROB};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::par;
use crate::rng::Rng;

/// Default clamp for estimated mechanisms, `phi in [eps, 1 - eps]`.
pub const DEFAULT_EPS_PHI: f64 = 1e-3;

/// Source of probabilities `p(. | x_i)` for the likelihood evaluators.
#[derive(Clone, Copy)]
pub(crate) enum Probs<'a> {
    Model(&'a ModelParams),
    /// Row-major `n x K` matrix indexed by sample.
    Cached(&'a [f64], usize),
}

impl<'a> Probs<'a> {
    fn get(&self, ds: &Dataset, i: usize) -> Cow<'a, [f64]> {
        match *self {
            Probs::Model(theta) => Cow::Owned(theta.forward(ds.x(i)).probs),
            Probs::Cached(p, k) => Cow::Borrowed(&p[i * k..(i + 1) * k]),
        }
    }
}

/// `sum_k p_k (1 - phi_k)`
#[inline]
fn unobserved_mass(p: &[f64], phi: &[f64]) -> f64 {
    p.iter().zip(phi).map(|(p, f)| p * (1.0 - f)).sum()
}

/// Weighted NLL over a view and the number of degenerate log arguments.
pub(crate) fn nll_view(probs: Probs, view: &View, phi: &[f64]) -> (f64, usize) {
    let idx = view.indices();
    let n_lab = view.labeled.len();
    par::map_reduce(
        idx.len(),
        |range| {
            let mut acc = (0.0, 0usize);
            for pos in range {
                let i = idx[pos];
                let p = probs.get(view.ds, i);
                let (arg, w) = if pos < n_lab {
                    let y = view.ds.label(i).expect("labeled sample");
                    (p[y] * phi[y], view.w_labeled)
                } else {
                    (unobserved_mass(&p, phi), view.w_unlabeled)
                };
                if arg <= EPS_PROB {
                    acc.1 += 1;
                }
                acc.0 -= w * ln_clamped(arg);
            }
            acc
        },
        (0.0, 0),
        |a, b| (a.0 + b.0, a.1 + b.1),
    )
}

pub(crate) fn grad_phi_view(probs: Probs, view: &View, phi: &[f64]) -> Vec<f64> {
    let k = phi.len();
    let idx = view.indices();
    let n_lab = view.labeled.len();
    par::map_reduce(
        idx.len(),
        |range| {
            let mut g = vec![0.0; k];
            for pos in range {
                let i = idx[pos];
                if pos < n_lab {
                    let y = view.ds.label(i).expect("labeled sample");
                    g[y] -= view.w_labeled / phi[y];
                } else {
                    let p = probs.get(view.ds, i);
                    let a = unobserved_mass(&p, phi);
                    for (gk, pk) in g.iter_mut().zip(p.iter()) {
                        *gk += view.w_unlabeled * pk / a;
                    }
                }
            }
            g
        },
        Vec::new(),
        par::add_vec,
    )
}

/// Row-major `K x K` Hessian in `phi`.
pub(crate) fn hessian_phi_view(probs: Probs, view: &View, phi: &[f64]) -> Vec<f64> {
    let k = phi.len();
    let idx = view.indices();
    let n_lab = view.labeled.len();
    par::map_reduce(
        idx.len(),
        |range| {
            let mut h = vec![0.0; k * k];
            for pos in range {
                let i = idx[pos];
                if pos < n_lab {
                    let y = view.ds.label(i).expect("labeled sample");
                    h[y * k + y] += view.w_labeled / (phi[y] * phi[y]);
                } else {
                    let p = probs.get(view.ds, i);
                    let a = unobserved_mass(&p, phi);
                    let s = view.w_unlabeled / (a * a);
                    for u in 0..k {
                        for v in 0..k {
                            h[u * k + v] += s * p[u] * p[v];
                        }
                    }
                }
            }
            h
        },
        Vec::new(),
        par::add_vec,
    )
}

/// Weighted NLL and its gradient in theta over a view.
pub(crate) fn grad_theta_view(theta: &ModelParams, view: &View, phi: &[f64]) -> (f64, Vec<f64>) {
    let idx = view.indices();
    let n_lab = view.labeled.len();
    let np = theta.n_params();
    par::map_reduce(
        idx.len(),
        |range| {
            let mut loss = 0.0;
            let mut g = vec![0.0; np];
            for pos in range {
                let i = idx[pos];
                let x = view.ds.x(i);
                let fwd = theta.forward(x);
                let p = &fwd.probs;
                let (l, dz, w) = if pos < n_lab {
                    let y = view.ds.label(i).expect("labeled sample");
                    let mut dz = p.clone();
                    dz[y] -= 1.0;
                    (-ln_clamped(p[y] * phi[y]), dz, view.w_labeled)
                } else {
                    let a = unobserved_mass(p, phi);
                    let dz = p.iter().zip(phi).map(|(pj, fj)| pj * (1.0 - (1.0 - fj) / a)).collect();
                    (-ln_clamped(a), dz, view.w_unlabeled)
                };
                loss += w * l;
                theta.backward(x, &fwd, &dz, w, &mut g);
            }
            (loss, g)
        },
        (0.0, Vec::new()),
        |a, b| (a.0 + b.0, par::add_vec(a.1, b.1)),
    )
}

fn check_inputs(theta: &ModelParams, phi: &Mechanism, ds: &Dataset) -> Result<()> {
    theta.check_dataset(ds)?;
    if phi.len() != ds.n_classes() {
        return Err(Error::DimensionMismatch {
            what: "mechanism",
            expected: ds.n_classes(),
            actual: phi.len(),
        });
    }
    ds.validate()
}

/// Observed negative log-likelihood (a sum over samples, without the
/// theta-free constant).
pub fn observed_nll(theta: &ModelParams, phi: &Mechanism, ds: &Dataset) -> Result<f64> {
    check_inputs(theta, phi, ds)?;
    let (value, degenerate) = nll_view(Probs::Model(theta), &View::unit(ds), phi.as_slice());
    if degenerate > 0 {
        log::warn!("degenerate mechanism: {degenerate} log arguments clamped at {EPS_PROB}");
    }
    Ok(value)
}

/// Gradient of [`observed_nll`] in `phi`.
pub fn nll_grad_phi(theta: &ModelParams, phi: &Mechanism, ds: &Dataset) -> Result<Vec<f64>> {
    check_inputs(theta, phi, ds)?;
    Ok(grad_phi_view(Probs::Model(theta), &View::unit(ds), phi.as_slice()))
}

/// Hessian of [`observed_nll`] in `phi`, as rows.
pub fn nll_hessian_phi(theta: &ModelParams, phi: &Mechanism, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    check_inputs(theta, phi, ds)?;
    let k = phi.len();
    let flat = hessian_phi_view(Probs::Model(theta), &View::unit(ds), phi.as_slice());
    Ok(flat.chunks(k).map(<[f64]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Uniform,
    User,
    Model,
    Buffered,
}

/// A class distribution `p(y)` and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub p: Vec<f64>,
    pub source: PriorSource,
}

impl ClassPrior {
    pub fn uniform(n_classes: usize) -> Self {
        Self {
            p: vec![1.0 / n_classes as f64; n_classes],
            source: PriorSource::Uniform,
        }
    }

    pub fn user(p: Vec<f64>) -> Result<Self> {
        Self::checked(p, PriorSource::User)
    }

    fn checked(p: Vec<f64>, source: PriorSource) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if p.len() < 2 || p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("class prior must be a probability vector"));
        }
        Ok(Self { p, source })
    }
}

/// Mean predicted class distribution over every sample (labeled or not).
pub fn class_prior_from_model(theta: &ModelParams, ds: &Dataset) -> Result<ClassPrior> {
    theta.check_dataset(ds)?;
    if ds.n() == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(ClassPrior {
        p: prior_view(theta, &View::full(ds)),
        source: PriorSource::Model,
    })
}

/// Weighted mean of predicted distributions over a view.
pub(crate) fn prior_view(theta: &ModelParams, view: &View) -> Vec<f64> {
    let idx = view.indices();
    let n_lab = view.labeled.len();
    let k = theta.n_classes;
    par::map_reduce(
        idx.len(),
        |range| {
            let mut acc = vec![0.0; k];
            for pos in range {
                let w = if pos < n_lab { view.w_labeled } else { view.w_unlabeled };
                let p = theta.forward(view.ds.x(idx[pos])).probs;
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += w * v;
                }
            }
            acc
        },
        Vec::new(),
        par::add_vec,
    )
}

/// Output of the method-of-moments estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    /// Clamped to `[eps, 1 - eps]`; use this for training.
    pub phi: Mechanism,
    /// Unclamped values; use these for diagnostics.
    pub raw: Vec<f64>,
}

/// `phi_y = (labeled count of class y / n) / prior_y`.
pub fn moment_estimator(ds: &Dataset, prior: &ClassPrior) -> Result<MomentEstimate> {
    moment_estimator_with_eps(ds, prior, DEFAULT_EPS_PHI)
}

pub fn moment_estimator_with_eps(ds: &Dataset, prior: &ClassPrior, eps: f64) -> Result<MomentEstimate> {
    if prior.p.len() != ds.n_classes() {
        return Err(Error::DimensionMismatch {
            what: "class prior",
            expected: ds.n_classes(),
            actual: prior.p.len(),
        });
    }
    if let Some(k) = prior.p.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("prior component {} is not positive", k + 1)));
    }
    ds.validate()?;
    let raw = moment_raw(&ds.labeled_counts(), ds.n(), &prior.p);
    Ok(MomentEstimate {
        phi: Mechanism::new(clamp_phi(&raw, eps))?,
        raw,
    })
}

pub(crate) fn moment_raw(counts: &[usize], n: usize, prior: &[f64]) -> Vec<f64> {
    counts
        .iter()
        .zip(prior)
        .map(|(&c, &p)| c as f64 / n as f64 / p)
        .collect()
}

/// Moving average of class distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    pub p: Vec<f64>,
    pub momentum: f64,
}

impl Buffer {
    pub fn new(initial: &ClassPrior, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(Self {
            p: initial.p.clone(),
            momentum,
        })
    }

    /// `mu * buffer + (1 - mu) * batch`, renormalized.
    pub fn update(&self, batch: &ClassPrior) -> Buffer {
        let mu = self.momentum;
        let mut p: Vec<f64> = self
            .p
            .iter()
            .zip(&batch.p)
            .map(|(b, q)| mu * b + (1.0 - mu) * q)
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Buffer { p, momentum: mu }
    }

    pub fn prior(&self) -> ClassPrior {
        ClassPrior {
            p: self.p.clone(),
            source: PriorSource::Buffered,
        }
    }
}

/// Whether the mechanism has one parameter per class or a single shared
/// parameter (the MCAR family).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MechanismShape {
    #[default]
    PerClass,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhiSolver {
    /// Alternating minibatch gradient steps on the sigmoid-reparametrized
    /// mechanism and on theta.
    #[default]
    Gradient,
    /// Damped Newton iterations in `phi`; requires a frozen theta.
    Newton,
}

/// Settings of the maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleConfig {
    pub gamma_phi: f64,
    pub gamma_theta: f64,
    pub epochs: usize,
    /// Samples per labeled and per unlabeled batch; `None` uses the full data.
    pub batch_size: Option<usize>,
    /// Quadratic penalty coefficient of the augmented Lagrangian.
    pub penalty: f64,
    /// Ascent rate of the Lagrange multiplier.
    pub multiplier_rate: f64,
    /// Enforce `sum_y (n_{l,y} / n) / phi_y = 1`.
    pub constrain_prior_sum: bool,
    pub eps_phi: f64,
    /// Starting mechanism; defaults to `n_l / n` for every class.
    pub phi_init: Option<Vec<f64>>,
    pub shape: MechanismShape,
    pub solver: PhiSolver,
    pub freeze_theta: bool,
    pub freeze_phi: bool,
    /// Gradient-norm stopping tolerance of the Newton solver.
    pub tolerance: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            gamma_phi: 0.1,
            gamma_theta: 0.1,
            epochs: 50,
            batch_size: Some(64),
            penalty: 1.0,
            multiplier_rate: 0.1,
            constrain_prior_sum: true,
            eps_phi: DEFAULT_EPS_PHI,
            phi_init: None,
            shape: MechanismShape::PerClass,
            solver: PhiSolver::Gradient,
            freeze_theta: false,
            freeze_phi: false,
            tolerance: 1e-10,
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_phi > 0.0 && self.gamma_theta > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.eps_phi > 0.0 && self.eps_phi < 0.5) {
            return Err(Error::invalid("eps_phi must lie in (0, 0.5)"));
        }
        if self.penalty < 0.0 || self.multiplier_rate < 0.0 {
            return Err(Error::invalid("penalty and multiplier rate must be non-negative"));
        }
        if self.solver == PhiSolver::Newton && !self.freeze_theta {
            return Err(Error::invalid("the Newton solver requires freeze_theta"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// One epoch of the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Full-data NLL divided by `n`.
    pub nll: f64,
    /// `sum_y (n_{l,y} / n) / phi_y - 1`.
    pub residual: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub phi: Mechanism,
    pub theta: ModelParams,
    pub trace: Vec<TraceRow>,
    pub multiplier: f64,
}

impl MleFit {
    /// Full-data NLL (sum) at the fitted parameters.
    pub fn nll(&self, ds: &Dataset) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.nll * ds.n() as f64)
    }
}

/// Constraint value and gradient for `sum_y q_y / phi_y - 1`.
fn prior_sum_constraint(q: &[f64], phi: &[f64]) -> (f64, Vec<f64>) {
    let c = q.iter().zip(phi).map(|(q, p)| q / p).sum::<f64>() - 1.0;
    let g = q.iter().zip(phi).map(|(q, p)| -q / (p * p)).collect();
    (c, g)
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

const DIVERGENCE_PATIENCE: usize = 10;

/// Tracks consecutive increases of a per-epoch objective.
#[derive(Debug, Default)]
pub(crate) struct DivergenceGuard {
    last: Option<f64>,
    increases: usize,
    history: Vec<f64>,
}

impl DivergenceGuard {
    pub fn record(&mut self, what: &'static str, epoch: usize, value: f64) -> Result<()> {
        self.history.push(value);
        if !value.is_finite() {
            return Err(self.abort(what, epoch, "objective is not finite"));
        }
        if let Some(last) = self.last {
            if value > last {
                self.increases += 1;
            } else {
                self.increases = 0;
            }
        }
        self.last = Some(value);
        if self.increases >= DIVERGENCE_PATIENCE {
            return Err(self.abort(what, epoch, "objective increased for 10 consecutive epochs"));
        }
        Ok(())
    }

    fn abort(&self, what: &'static str, epoch: usize, reason: &str) -> Error {
        Error::Diverged {
            what,
            epoch,
            reason: reason.into(),
            trace: self.history.clone(),
        }
    }
}

/// Joint maximum-likelihood estimate of `(theta, phi)`.
///
/// With the gradient solver each step takes one stratified minibatch for a
/// `phi` update (in logit space, with the augmented-Lagrangian terms) and a
/// fresh minibatch for a `theta` update, as long as neither is frozen. The
/// multiplier ascends on the constraint residual after every `phi` step.
pub fn mle_fit(ds: &Dataset, theta0: &ModelParams, config: &MleConfig, rng: &mut Rng) -> Result<MleFit> {
    config.validate()?;
    theta0.check_dataset(ds)?;
    ds.validate()?;
    let k = ds.n_classes();
    let n = ds.n();
    let q: Vec<f64> = ds.labeled_counts().iter().map(|&c| c as f64 / n as f64).collect();
    let eps = config.eps_phi;

    let mut phi = match &config.phi_init {
        Some(init) => {
            if init.len() != k {
                return Err(Error::DimensionMismatch {
                    what: "phi_init",
                    expected: k,
                    actual: init.len(),
                });
            }
            clamp_phi(init, eps)
        }
        None => vec![ds.labeled_fraction().clamp(eps, 1.0 - eps); k],
    };
    if config.shape == MechanismShape::Shared {
        let mean = phi.iter().sum::<f64>() / k as f64;
        phi = vec![mean; k];
    }

    let mut theta = theta0.clone();
    let cached: Option<Vec<f64>> = config.freeze_theta.then(|| theta.predict_all(ds));
    let mut multiplier = 0.0;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut guard = DivergenceGuard::default();

    let record = |phi: &[f64], theta: &ModelParams, epoch: usize, trace: &mut Vec<TraceRow>| -> f64 {
        let probs = match &cached {
            Some(c) => Probs::Cached(c, k),
            None => Probs::Model(theta),
        };
        let (nll, _) = nll_view(probs, &View::full(ds), phi);
        trace.push(TraceRow {
            epoch,
            nll,
            residual: prior_sum_constraint(&q, phi).0,
            phi: phi.to_vec(),
        });
        nll
    };

    if config.solver == PhiSolver::Newton {
        let probs = Probs::Cached(cached.as_deref().expect("frozen theta"), k);
        for epoch in 1..=config.epochs {
            if !config.freeze_phi {
                phi = newton_phi(probs, ds, &q, phi, multiplier, config);
                if config.constrain_prior_sum {
                    multiplier += config.penalty * prior_sum_constraint(&q, &phi).0;
                }
            }
            let nll = record(&phi, &theta, epoch, &mut trace);
            guard.record("mle_fit", epoch, nll)?;
            if !config.constrain_prior_sum || prior_sum_constraint(&q, &phi).0.abs() < 1e-12 {
                break;
            }
        }
    } else {
        let (u_lo, u_hi) = (logit(eps), logit(1.0 - eps));
        let mut u: Vec<f64> = phi.iter().map(|&p| logit(p)).collect();
        let mut sampler = BatchSampler::new(ds, config.batch_size);
        for epoch in 1..=config.epochs {
            sampler.start_epoch(rng);
            for _ in 0..sampler.steps_per_epoch() {
                let phi_k = phi.clone();
                if !config.freeze_phi {
                    let (lab, unl) = sampler.next_batch(rng);
                    let view = View::batch(ds, lab, unl);
                    let probs = match &cached {
                        Some(c) => Probs::Cached(c, k),
                        None => Probs::Model(&theta),
                    };
                    let mut g = grad_phi_view(probs, &view, &phi);
                    if config.constrain_prior_sum {
                        let (c, gc) = prior_sum_constraint(&q, &phi);
                        let scale = multiplier + config.penalty * c;
                        g.iter_mut().zip(&gc).for_each(|(g, gc)| *g += scale * gc);
                    }
                    // chain rule through phi = sigmoid(u)
                    let gu: Vec<f64> = g.iter().zip(&phi).map(|(g, p)| g * p * (1.0 - p)).collect();
                    match config.shape {
                        MechanismShape::PerClass => {
                            for (u, g) in u.iter_mut().zip(&gu) {
                                *u = (*u - config.gamma_phi * g).clamp(u_lo, u_hi);
                            }
                        }
                        MechanismShape::Shared => {
                            let total: f64 = gu.iter().sum();
                            let shared = (u[0] - config.gamma_phi * total).clamp(u_lo, u_hi);
                            u.iter_mut().for_each(|u| *u = shared);
                        }
                    }
                    phi = u.iter().map(|&v| sigmoid(v)).collect();
                    if config.constrain_prior_sum {
                        multiplier += config.multiplier_rate * prior_sum_constraint(&q, &phi).0;
                    }
                }
                if !config.freeze_theta {
                    let (lab, unl) = sampler.next_batch(rng);
                    let view = View::batch(ds, lab, unl);
                    let (_, g) = grad_theta_view(&theta, &view, &phi_k);
                    for (p, g) in theta.params_mut().iter_mut().zip(&g) {
                        *p -= config.gamma_theta * g;
                    }
                }
            }
            let nll = record(&phi, &theta, epoch, &mut trace);
            guard.record("mle_fit", epoch, nll)?;
        }
    }

    Ok(MleFit {
        phi: Mechanism::new(phi)?,
        theta,
        trace,
        multiplier,
    })
}

/// Minimizes the (augmented) mean NLL in `phi` by damped Newton steps inside
/// `[eps, 1 - eps]`.
fn newton_phi(
    probs: Probs,
    ds: &Dataset,
    q: &[f64],
    mut phi: Vec<f64>,
    multiplier: f64,
    config: &MleConfig,
) -> Vec<f64> {
    let k = phi.len();
    let eps = config.eps_phi;
    let view = View::full(ds);
    let objective = |phi: &[f64]| -> f64 {
        let (mut f, _) = nll_view(probs, &view, phi);
        if config.constrain_prior_sum {
            let (c, _) = prior_sum_constraint(q, phi);
            f += multiplier * c + 0.5 * config.penalty * c * c;
        }
        f
    };
    let mut f = objective(&phi);
    for _ in 0..100 {
        let mut g = grad_phi_view(probs, &view, &phi);
        let mut h = hessian_phi_view(probs, &view, &phi);
        if config.constrain_prior_sum {
            let (c, gc) = prior_sum_constraint(q, &phi);
            let scale = multiplier + config.penalty * c;
            for u in 0..k {
                g[u] += scale * gc[u];
                h[u * k + u] += scale * 2.0 * q[u] / phi[u].powi(3);
                for v in 0..k {
                    h[u * k + v] += config.penalty * gc[u] * gc[v];
                }
            }
        }
        let direction = match config.shape {
            MechanismShape::PerClass => cholesky_solve(&h, &g, k).unwrap_or_else(|| g.clone()),
            MechanismShape::Shared => {
                let gs: f64 = g.iter().sum();
                let hs: f64 = h.iter().sum();
                vec![if hs > 0.0 { gs / hs } else { gs }; k]
            }
        };
        let gnorm = match config.shape {
            MechanismShape::PerClass => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            MechanismShape::Shared => g.iter().sum::<f64>().abs(),
        };
        if gnorm < config.tolerance {
            break;
        }
        let slope: f64 = g.iter().zip(&direction).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand: Vec<f64> = phi.iter().zip(&direction).map(|(p, d)| p - t * d).collect();
            if cand.iter().all(|&p| p >= eps && p <= 1.0 - eps) {
                let fc = objective(&cand);
                if fc <= f - 1e-4 * t * slope.max(0.0) {
                    phi = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    phi
}

/// Solves `H x = b` for a symmetric positive-definite `H`.
fn cholesky_solve(h: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i * k + m] * l[j * k + m]).sum();
            if i == j {
                let d = h[i * k + i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * k + i] = d.sqrt();
            } else {
                l[i * k + j] = (h[i * k + j] - s) / l[j * k + j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        let s: f64 = (0..i).map(|m| l[i * k + m] * y[m]).sum();
        y[i] = (b[i] - s) / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|m| l[m * k + i] * x[m]).sum();
        x[i] = (y[i] - s) / l[i * k + i];
    }
    Some(x)
}
