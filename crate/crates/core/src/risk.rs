//! Empirical risks for training under informative label missingness.
//!
//! With `l_l` the supervised loss and `l_u` an unlabeled surrogate:
//!
//! ```text
//! complete case   (1 / n_l) sum_{r=1} l_l
//! IPW             (1 / n)   sum_{r=1} l_l / phi_y
//! classical SSL   (1 / n_l) sum_{r=1} l_l + (lambda / n_u) sum_{r=0} l_u
//! debiased SSL    (1 / n)   sum_{r=1} l_l / phi_y
//!                   - (lambda / n) sum_i (r_i - phi_{y_i}) / phi_{y_i} l_u
//! ```
//!
//! In the debiased correction an unlabeled sample has weight
//! `(0 - phi_y) / phi_y = -1` whatever its class, so the unobserved label is
//! never needed: unlabeled samples enter with `+lambda / n` and labeled ones
//! with `-lambda (1 - phi_y) / (n phi_y)`.

use serde::{Deserialize, Serialize};

use crate::batch::View;
use crate::data::{Dataset, Mechanism};
use crate::error::{Error, Result};
use crate::mechanism::{moment_raw, prior_view, DEFAULT_EPS_PHI};
use crate::model::{nll_terms, unlabeled_terms, Gradient, ModelParams, UnlabeledLoss};
use crate::par;

/// Unlabeled regularization of the SSL risks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub lambda: f64,
    /// The pseudo-label threshold of this loss serves as `tau0`.
    pub unlabeled_loss: UnlabeledLoss,
    /// Adaptivity exponent of the per-class pseudo-label thresholds; `0`
    /// keeps a single threshold.
    pub beta: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            unlabeled_loss: UnlabeledLoss::Entropy,
            beta: 0.0,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if let UnlabeledLoss::PseudoLabel { tau } = self.unlabeled_loss {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::invalid("pseudo-label threshold must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Per-class pseudo-label thresholds under `phi`, or `None` for a single
    /// fixed threshold.
    pub(crate) fn thresholds(&self, phi: &[f64]) -> Option<Vec<f64>> {
        match self.unlabeled_loss {
            UnlabeledLoss::PseudoLabel { tau } if self.beta > 0.0 => Some(adaptive_threshold(phi, tau, self.beta)),
            _ => None,
        }
    }
}

/// `tau0 * (phi_y / max phi)^beta`: the most observed class keeps `tau0`,
/// rarer classes get a lower cutoff.
pub fn adaptive_threshold(phi: &[f64], tau0: f64, beta: f64) -> Vec<f64> {
    let max = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    phi.iter()
        .map(|&p| if p == max { tau0 } else { tau0 * (p / max).powf(beta) })
        .collect()
}

/// Per-sample weights of a risk over a view.
#[derive(Debug, Clone)]
pub(crate) struct Weights<'a> {
    /// Weight of the supervised loss of a labeled sample of class `y`.
    pub supervised: Vec<f64>,
    /// Weight of the unlabeled loss of a labeled sample of class `y`.
    pub unlabeled_on_labeled: Vec<f64>,
    /// Weight of the unlabeled loss of an unlabeled sample.
    pub unlabeled: f64,
    pub kind: UnlabeledLoss,
    pub thresholds: Option<&'a [f64]>,
}

impl<'a> Weights<'a> {
    fn supervised_only(supervised: Vec<f64>) -> Self {
        let k = supervised.len();
        Self {
            supervised,
            unlabeled_on_labeled: vec![0.0; k],
            unlabeled: 0.0,
            kind: UnlabeledLoss::Entropy,
            thresholds: None,
        }
    }

    /// Complete-case risk, also the supervised part of classical SSL.
    pub fn complete_case(view: &View) -> Self {
        let frac = view.ds.labeled_fraction();
        Self::supervised_only(vec![view.w_labeled / frac; view.ds.n_classes()])
    }

    pub fn ipw(view: &View, phi: &[f64]) -> Self {
        Self::supervised_only(phi.iter().map(|p| view.w_labeled / p).collect())
    }

    pub fn classical(view: &View, config: &RiskConfig) -> Self {
        let mut w = Self::complete_case(view);
        let frac_u = view.ds.n_unlabeled() as f64 / view.ds.n() as f64;
        w.unlabeled = if frac_u > 0.0 {
            view.w_unlabeled * config.lambda / frac_u
        } else {
            0.0
        };
        w.kind = config.unlabeled_loss;
        w
    }

    pub fn debiased(view: &View, phi: &[f64], config: &RiskConfig, thresholds: Option<&'a [f64]>) -> Self {
        let lambda = config.lambda;
        Self {
            supervised: phi.iter().map(|p| view.w_labeled / p).collect(),
            unlabeled_on_labeled: phi.iter().map(|p| -view.w_labeled * lambda * (1.0 - p) / p).collect(),
            unlabeled: view.w_unlabeled * lambda,
            kind: config.unlabeled_loss,
            thresholds,
        }
    }
}

/// Per-class sums over labeled samples of `l_l` and `l_u`, weighted by the
/// view weight; needed for derivatives in `phi`.
type ClassSums = (Vec<f64>, Vec<f64>);

/// Weighted risk over a view and its gradient in theta.
pub(crate) fn risk_view(theta: &ModelParams, view: &View, w: &Weights) -> (f64, Vec<f64>) {
    let (value, grad, _) = risk_view_with_sums(theta, view, w);
    (value, grad)
}

fn risk_view_with_sums(theta: &ModelParams, view: &View, w: &Weights) -> (f64, Vec<f64>, ClassSums) {
    let idx = view.indices();
    let n_lab = view.labeled.len();
    let np = theta.n_params();
    let k = theta.n_classes;
    let (value, grad, sums) = par::map_reduce(
        idx.len(),
        |range| {
            let mut loss = 0.0;
            let mut g = vec![0.0; np];
            let mut sums = (vec![0.0; k], vec![0.0; k]);
            for pos in range {
                let i = idx[pos];
                let x = view.ds.x(i);
                let fwd = theta.forward(x);
                let mut dz = vec![0.0; k];
                if pos < n_lab {
                    let y = view.ds.label(i).expect("labeled sample");
                    let (ls, ds) = nll_terms(&fwd.probs, y);
                    loss += w.supervised[y] * ls;
                    add_scaled(&mut dz, &ds, w.supervised[y]);
                    sums.0[y] += view.w_labeled * ls;
                    let wu = w.unlabeled_on_labeled[y];
                    if wu != 0.0 {
                        let (lu, du) = unlabeled_terms(&fwd.probs, w.kind, w.thresholds);
                        loss += wu * lu;
                        add_scaled(&mut dz, &du, wu);
                        sums.1[y] += view.w_labeled * lu;
                    }
                } else if w.unlabeled != 0.0 {
                    let (lu, du) = unlabeled_terms(&fwd.probs, w.kind, w.thresholds);
                    loss += w.unlabeled * lu;
                    add_scaled(&mut dz, &du, w.unlabeled);
                }
                theta.backward(x, &fwd, &dz, 1.0, &mut g);
            }
            (loss, g, sums)
        },
        (0.0, Vec::new(), (Vec::new(), Vec::new())),
        |a, b| {
            (
                a.0 + b.0,
                par::add_vec(a.1, b.1),
                (par::add_vec(a.2 .0, b.2 .0), par::add_vec(a.2 .1, b.2 .1)),
            )
        },
    );
    let sums = if sums.0.is_empty() {
        (vec![0.0; k], vec![0.0; k])
    } else {
        sums
    };
    (value, grad, sums)
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

fn check(theta: &ModelParams, ds: &Dataset) -> Result<()> {
    theta.check_dataset(ds)?;
    ds.validate()
}

fn check_phi(phi: &Mechanism, ds: &Dataset) -> Result<()> {
    if phi.len() != ds.n_classes() {
        return Err(Error::DimensionMismatch {
            what: "mechanism",
            expected: ds.n_classes(),
            actual: phi.len(),
        });
    }
    Ok(())
}

/// Mean supervised loss over the labeled samples.
pub fn cc_risk(theta: &ModelParams, ds: &Dataset) -> Result<f64> {
    check(theta, ds)?;
    let view = View::full(ds);
    Ok(risk_view(theta, &view, &Weights::complete_case(&view)).0)
}

/// Inverse-propensity-weighted supervised risk, normalized by `n`.
pub fn ipw_risk(theta: &ModelParams, ds: &Dataset, phi: &Mechanism) -> Result<f64> {
    Ok(ipw_risk_grad(theta, ds, phi)?.0)
}

pub fn ipw_risk_grad(theta: &ModelParams, ds: &Dataset, phi: &Mechanism) -> Result<(f64, Gradient)> {
    check(theta, ds)?;
    check_phi(phi, ds)?;
    let view = View::full(ds);
    let (v, g) = risk_view(theta, &view, &Weights::ipw(&view, phi.as_slice()));
    Ok((v, Gradient(g)))
}

/// Classical SSL risk, which treats labels as missing completely at random.
pub fn ssl_risk(theta: &ModelParams, ds: &Dataset, config: &RiskConfig) -> Result<(f64, Gradient)> {
    config.validate()?;
    check(theta, ds)?;
    let view = View::full(ds);
    let (v, g) = risk_view(theta, &view, &Weights::classical(&view, config));
    Ok((v, Gradient(g)))
}

/// Debiased SSL risk at a fixed mechanism.
pub fn debiased_ssl_risk(
    theta: &ModelParams,
    ds: &Dataset,
    phi: &Mechanism,
    config: &RiskConfig,
) -> Result<(f64, Gradient)> {
    config.validate()?;
    check(theta, ds)?;
    check_phi(phi, ds)?;
    let view = View::full(ds);
    let thresholds = config.thresholds(phi.as_slice());
    let w = Weights::debiased(&view, phi.as_slice(), config, thresholds.as_deref());
    let (v, g) = risk_view(theta, &view, &w);
    Ok((v, Gradient(g)))
}

/// Debiased SSL risk with the mechanism given by the moment estimator under
/// the model's own class prior, differentiated through that estimate.
///
/// Returns the value, the total gradient in theta and the mechanism used.
/// Components clamped to `[eps, 1 - eps]` carry no gradient; the
/// pseudo-label thresholds are treated as constants.
pub fn debiased_ssl_risk_through_prior(
    theta: &ModelParams,
    ds: &Dataset,
    config: &RiskConfig,
) -> Result<(f64, Gradient, Mechanism)> {
    config.validate()?;
    check(theta, ds)?;
    let (v, g, phi) = debiased_through_prior_view(theta, &View::full(ds), config, DEFAULT_EPS_PHI);
    Ok((v, Gradient(g), Mechanism::new(phi)?))
}

pub(crate) fn debiased_through_prior_view(
    theta: &ModelParams,
    view: &View,
    config: &RiskConfig,
    eps: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let ds = view.ds;
    let prior = prior_view(theta, view);
    let raw = moment_raw(&ds.labeled_counts(), ds.n(), &prior);
    let phi: Vec<f64> = raw.iter().map(|p| p.clamp(eps, 1.0 - eps)).collect();
    let thresholds = config.thresholds(&phi);
    let w = Weights::debiased(view, &phi, config, thresholds.as_deref());
    let (value, mut grad, (sum_l, sum_u)) = risk_view_with_sums(theta, view, &w);

    // d risk / d phi_k, then d phi_k / d prior_k = -phi_k / prior_k
    let lambda = config.lambda;
    let g_prior: Vec<f64> = (0..phi.len())
        .map(|c| {
            if raw[c] != phi[c] {
                return 0.0;
            }
            let d_phi = -(sum_l[c] - lambda * sum_u[c]) / (phi[c] * phi[c]);
            d_phi * (-phi[c] / prior[c])
        })
        .collect();
    if g_prior.iter().any(|&v| v != 0.0) {
        let extra = prior_backward(theta, view, &g_prior);
        for (a, b) in grad.iter_mut().zip(extra) {
            *a += b;
        }
    }
    (value, grad, phi)
}

/// Gradient in theta of `sum_k g_k prior_k(theta)` where the prior is the
/// weighted mean prediction over the view.
fn prior_backward(theta: &ModelParams, view: &View, g: &[f64]) -> Vec<f64> {
    let idx = view.indices();
    let n_lab = view.labeled.len();
    let np = theta.n_params();
    par::map_reduce(
        idx.len(),
        |range| {
            let mut acc = vec![0.0; np];
            for pos in range {
                let w = if pos < n_lab { view.w_labeled } else { view.w_unlabeled };
                let x = view.ds.x(idx[pos]);
                let fwd = theta.forward(x);
                let s: f64 = fwd.probs.iter().zip(g).map(|(p, g)| p * g).sum();
                let dz: Vec<f64> = fwd.probs.iter().zip(g).map(|(p, g)| p * (g - s)).collect();
                theta.backward(x, &fwd, &dz, w, &mut acc);
            }
            acc
        },
        Vec::new(),
        par::add_vec,
    )
}
