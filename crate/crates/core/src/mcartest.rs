//! Likelihood-ratio test of MCAR labels against a class-dependent mechanism.
//!
//! Under the null every class has the same observation probability, whose
//! maximum-likelihood value is `n_l / n` for any theta. The statistic
//! `2 (l_restricted - l_unrestricted)` is referred to a chi-squared law with
//! `K - 1` degrees of freedom. The reference is exact asymptotically for a
//! fixed theta; with theta optimized jointly it is a conjecture, and the
//! report records which regime was used.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mechanism};
use crate::error::{Error, Result};
use crate::mechanism::{mle_fit, observed_nll, MleConfig, PhiSolver};
use crate::model::ModelParams;
use crate::rng::Rng;

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma function `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "gamma_q requires a > 0 and x >= 0");
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

const ITMAX: usize = 10_000;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..ITMAX {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Modified Lentz evaluation of the continued fraction for `Q(a, x)`.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..ITMAX {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Survival function of the chi-squared law with `dof` degrees of freedom.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    assert!(dof >= 1, "chi2_sf requires at least one degree of freedom");
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(dof as f64 / 2.0, x / 2.0)
}

/// How theta is treated in both fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    /// Theta stays at the supplied value; only `phi` is fitted.
    #[default]
    Frozen,
    /// Theta is optimized in both fits, starting from the supplied value.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrTestConfig {
    pub alpha: f64,
    pub theta: ThetaMode,
    /// Settings of the unrestricted fit (and of the theta-only restricted fit
    /// in joint mode). The prior-sum constraint is never imposed here.
    pub mle: MleConfig,
}

impl Default for LrTestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            theta: ThetaMode::Frozen,
            mle: MleConfig {
                solver: PhiSolver::Newton,
                freeze_theta: true,
                constrain_prior_sum: false,
                ..MleConfig::default()
            },
        }
    }
}

impl LrTestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        self.fit_config(None, false).validate()
    }

    fn fit_config(&self, phi_init: Option<Vec<f64>>, freeze_phi: bool) -> MleConfig {
        let frozen = self.theta == ThetaMode::Frozen;
        MleConfig {
            constrain_prior_sum: false,
            freeze_theta: frozen,
            freeze_phi,
            phi_init,
            solver: if frozen { self.mle.solver } else { PhiSolver::Gradient },
            ..self.mle.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    pub theta_frozen: bool,
    /// NLL (sum over samples) at the MCAR fit.
    pub nll_restricted: f64,
    /// NLL (sum over samples) at the class-dependent fit.
    pub nll_unrestricted: f64,
    pub phi_restricted: f64,
    pub phi_unrestricted: Vec<f64>,
    pub theta_restricted: Vec<f64>,
    pub theta_unrestricted: Vec<f64>,
}

impl TestReport {
    /// One line for humans.
    pub fn summary(&self) -> String {
        format!(
            "LR = {:.4}, dof = {}, p = {:.4e}, {} MCAR at alpha = {} ({} theta)",
            self.statistic,
            self.dof,
            self.p_value,
            if self.reject { "reject" } else { "do not reject" },
            self.alpha,
            if self.theta_frozen { "frozen" } else { "joint" },
        )
    }
}

/// Fits the MCAR and the class-dependent models and compares them.
///
/// The unrestricted fit starts from the restricted optimum, so with an exact
/// optimizer the statistic is non-negative; it is floored at zero to absorb
/// optimizer slack.
pub fn lr_statistic(ds: &Dataset, theta0: &ModelParams, config: &LrTestConfig, rng: &mut Rng) -> Result<TestReport> {
    config.validate()?;
    theta0.check_dataset(ds)?;
    ds.validate()?;
    let k = ds.n_classes();
    let phi0 = ds
        .labeled_fraction()
        .clamp(config.mle.eps_phi, 1.0 - config.mle.eps_phi);
    let mcar = Mechanism::mcar(k, phi0)?;

    let theta_r = match config.theta {
        ThetaMode::Frozen => theta0.clone(),
        ThetaMode::Joint => mle_fit(ds, theta0, &config.fit_config(Some(vec![phi0; k]), true), rng)?.theta,
    };
    let nll_r = observed_nll(&theta_r, &mcar, ds)?;

    let fit = mle_fit(ds, &theta_r, &config.fit_config(Some(vec![phi0; k]), false), rng)?;
    let nll_u = observed_nll(&fit.theta, &fit.phi, ds)?;

    let statistic = (2.0 * (nll_r - nll_u)).max(0.0);
    let dof = k - 1;
    let p_value = chi2_sf(statistic, dof);
    Ok(TestReport {
        statistic,
        dof,
        p_value,
        alpha: config.alpha,
        reject: p_value < config.alpha,
        theta_frozen: config.theta == ThetaMode::Frozen,
        nll_restricted: nll_r,
        nll_unrestricted: nll_u,
        phi_restricted: phi0,
        phi_unrestricted: fit.phi.into_vec(),
        theta_restricted: theta_r.params().to_vec(),
        theta_unrestricted: fit.theta.params().to_vec(),
    })
}
