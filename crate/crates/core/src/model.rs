//! Softmax classifiers `p(y | x; theta)` with analytic gradients.
//!
//! Parameters are stored in one flat vector:
//!
//! * linear softmax: `W` (K x d, row-major) then `b` (K);
//! * one hidden layer: `W1` (h x d), `b1` (h), `W2` (K x h), `b2` (K),
//!   with `tanh` activations.
//!
//! Every loss is expressed through its derivative with respect to the
//! logits; [`ModelParams::backward`] turns that into a parameter gradient.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{ln_clamped, Dataset};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    LinearSoftmax,
    OneHidden { width: usize },
}

impl Architecture {
    pub fn n_params(&self, dim: usize, n_classes: usize) -> usize {
        match *self {
            Architecture::LinearSoftmax => n_classes * dim + n_classes,
            Architecture::OneHidden { width } => width * dim + width + n_classes * width + n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub input_dim: usize,
    pub n_classes: usize,
    params: Vec<f64>,
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Loss applied to samples whose label is not used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnlabeledLoss {
    /// Shannon entropy of the prediction.
    Entropy,
    /// Cross-entropy against the (detached) argmax class, applied only when
    /// its probability reaches `tau`.
    PseudoLabel { tau: f64 },
}

impl ModelParams {
    pub fn zeros(arch: Architecture, input_dim: usize, n_classes: usize) -> Self {
        Self {
            arch,
            input_dim,
            n_classes,
            params: vec![0.0; arch.n_params(input_dim, n_classes)],
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn random(arch: Architecture, input_dim: usize, n_classes: usize, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(arch, input_dim, n_classes);
        let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in slice {
                *w = rng.random_range(-a..a);
            }
        };
        let (d, k) = (input_dim, n_classes);
        match arch {
            Architecture::LinearSoftmax => fill(&mut m.params[..k * d], d, k),
            Architecture::OneHidden { width: h } => {
                fill(&mut m.params[..h * d], d, h);
                let w2 = h * d + h;
                fill(&mut m.params[w2..w2 + k * h], h, k);
            }
        }
        m
    }

    pub fn from_vec(arch: Architecture, input_dim: usize, n_classes: usize, params: Vec<f64>) -> Result<Self> {
        let expected = arch.n_params(input_dim, n_classes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "model parameters",
                expected,
                actual: params.len(),
            });
        }
        if n_classes < 2 || input_dim == 0 {
            return Err(Error::invalid("model needs d >= 1 and K >= 2"));
        }
        if let Architecture::OneHidden { width: 0 } = arch {
            return Err(Error::invalid("hidden width must be positive"));
        }
        Ok(Self {
            arch,
            input_dim,
            n_classes,
            params,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn forward(&self, x: &[f64]) -> Forward {
        let (d, k) = (self.input_dim, self.n_classes);
        let p = &self.params;
        let mut logits = vec![0.0; k];
        let hidden = match self.arch {
            Architecture::LinearSoftmax => {
                let (w, b) = p.split_at(k * d);
                for (j, z) in logits.iter_mut().enumerate() {
                    *z = b[j] + dot(&w[j * d..(j + 1) * d], x);
                }
                Vec::new()
            }
            Architecture::OneHidden { width: h } => {
                let (w1, rest) = p.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let hidden: Vec<f64> = (0..h)
                    .map(|u| (b1[u] + dot(&w1[u * d..(u + 1) * d], x)).tanh())
                    .collect();
                for (j, z) in logits.iter_mut().enumerate() {
                    *z = b2[j] + dot(&w2[j * h..(j + 1) * h], &hidden);
                }
                hidden
            }
        };
        Forward {
            hidden,
            probs: softmax(&logits),
        }
    }

    /// Accumulates `scale * d(loss)/d(theta)` into `grad`, given
    /// `dlogits = d(loss)/d(logits)` for input `x`.
    pub(crate) fn backward(&self, x: &[f64], fwd: &Forward, dlogits: &[f64], scale: f64, grad: &mut [f64]) {
        let (d, k) = (self.input_dim, self.n_classes);
        match self.arch {
            Architecture::LinearSoftmax => {
                let (gw, gb) = grad.split_at_mut(k * d);
                for j in 0..k {
                    let g = scale * dlogits[j];
                    if g == 0.0 {
                        continue;
                    }
                    gb[j] += g;
                    for (gw, xi) in gw[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                }
            }
            Architecture::OneHidden { width: h } => {
                let w2 = &self.params[h * d + h..h * d + h + k * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                let mut dhidden = vec![0.0; h];
                for j in 0..k {
                    let g = scale * dlogits[j];
                    if g == 0.0 {
                        continue;
                    }
                    gb2[j] += g;
                    let row = j * h..(j + 1) * h;
                    for ((gw, a), (dh, w)) in gw2[row.clone()]
                        .iter_mut()
                        .zip(&fwd.hidden)
                        .zip(dhidden.iter_mut().zip(&w2[row]))
                    {
                        *gw += g * a;
                        *dh += g * w;
                    }
                }
                for u in 0..h {
                    let a = fwd.hidden[u];
                    let g = dhidden[u] * (1.0 - a * a);
                    if g == 0.0 {
                        continue;
                    }
                    gb1[u] += g;
                    for (gw, xi) in gw1[u * d..(u + 1) * d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                }
            }
        }
    }

    /// Class probabilities for one input.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input features"));
        }
        Ok(self.forward(x).probs)
    }

    /// Row-major `n x K` matrix of predicted probabilities.
    pub fn predict_all(&self, dataset: &Dataset) -> Vec<f64> {
        let k = self.n_classes;
        par::map_reduce(
            dataset.n(),
            |range| {
                let mut out = Vec::with_capacity(range.len() * k);
                for i in range {
                    out.extend(self.forward(dataset.x(i)).probs);
                }
                out
            },
            Vec::with_capacity(dataset.n() * k),
            |mut acc, part| {
                acc.extend(part);
                acc
            },
        )
    }

    /// Plain gradient step `theta -= lr * grad`.
    pub fn step(&mut self, grad: &Gradient, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(&grad.0) {
            *p -= lr * g;
        }
    }

    pub(crate) fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: self.input_dim,
                actual: dataset.dim(),
            });
        }
        if dataset.n_classes() != self.n_classes {
            return Err(Error::DimensionMismatch {
                what: "class count",
                expected: self.n_classes,
                actual: dataset.n_classes(),
            });
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest probability; ties go to the smallest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// `-log p[y]` and its logit derivative `p - e_y`.
pub(crate) fn nll_terms(p: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mut dz = p.to_vec();
    dz[y] -= 1.0;
    (-ln_clamped(p[y]), dz)
}

/// Shannon entropy `H = -sum p log p` and its logit derivative
/// `-p_j (log p_j + H)`.
pub(crate) fn entropy_terms(p: &[f64]) -> (f64, Vec<f64>) {
    let logs: Vec<f64> = p.iter().map(|&v| ln_clamped(v)).collect();
    let h = -p.iter().zip(&logs).map(|(v, l)| v * l).sum::<f64>();
    let dz = p.iter().zip(&logs).map(|(v, l)| -v * (l + h)).collect();
    (h, dz)
}

/// Pseudo-label loss with per-class thresholds indexed by the predicted
/// class. Returns `None` when the prediction is below its threshold.
pub(crate) fn pseudo_label_terms(p: &[f64], thresholds: &[f64]) -> Option<(f64, Vec<f64>)> {
    let yhat = argmax(p);
    (p[yhat] >= thresholds[yhat]).then(|| nll_terms(p, yhat))
}

/// Unlabeled loss and logit derivative for one prediction.
pub(crate) fn unlabeled_terms(p: &[f64], kind: UnlabeledLoss, thresholds: Option<&[f64]>) -> (f64, Vec<f64>) {
    match kind {
        UnlabeledLoss::Entropy => entropy_terms(p),
        UnlabeledLoss::PseudoLabel { tau } => {
            let fixed;
            let th = match thresholds {
                Some(t) => t,
                None => {
                    fixed = vec![tau; p.len()];
                    &fixed
                }
            };
            pseudo_label_terms(p, th).unwrap_or_else(|| (0.0, vec![0.0; p.len()]))
        }
    }
}

/// `-weight * log p(y | x; theta)` and its gradient.
pub fn supervised_loss_grad(theta: &ModelParams, x: &[f64], y: usize, weight: f64) -> Result<(f64, Gradient)> {
    if y >= theta.n_classes {
        return Err(Error::invalid(format!(
            "label {} outside 1..={}",
            y + 1,
            theta.n_classes
        )));
    }
    if weight < 0.0 {
        return Err(Error::invalid("weight must be non-negative"));
    }
    theta.predict_proba(x)?;
    let fwd = theta.forward(x);
    let (loss, dz) = nll_terms(&fwd.probs, y);
    let mut grad = Gradient::zeros(theta.n_params());
    if weight != 0.0 {
        theta.backward(x, &fwd, &dz, weight, &mut grad.0);
    }
    Ok((weight * loss, grad))
}

/// Weighted unlabeled loss (entropy or thresholded pseudo-label) and its
/// gradient. The pseudo-label target is treated as a constant.
pub fn unsupervised_loss_grad(
    theta: &ModelParams,
    x: &[f64],
    kind: UnlabeledLoss,
    weight: f64,
) -> Result<(f64, Gradient)> {
    if let UnlabeledLoss::PseudoLabel { tau } = kind {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid("pseudo-label threshold must lie in (0, 1]"));
        }
    }
    theta.predict_proba(x)?;
    let fwd = theta.forward(x);
    let (loss, dz) = unlabeled_terms(&fwd.probs, kind, None);
    let mut grad = Gradient::zeros(theta.n_params());
    if weight != 0.0 {
        theta.backward(x, &fwd, &dz, weight, &mut grad.0);
    }
    Ok((weight * loss, grad))
}
