//! Datasets with partially observed labels, the missing-data mechanism and
//! the sealed ground truth kept aside for evaluation.
//!
//! Class indices are 0-based everywhere inside the library. External files
//! use 1-based indices; the conversion happens only in [`crate::format`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every probability before a logarithm.
pub const EPS_PROB: f64 = 1e-12;

/// Clamped natural logarithm of a probability.
#[inline]
pub fn ln_clamped(p: f64) -> f64 {
    p.max(EPS_PROB).ln()
}

/// A feature matrix with one optional label and one observation indicator
/// per sample.
///
/// Construction only checks shapes; [`Dataset::validate`] checks the label
/// invariants so that malformed inputs can be reported precisely.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<Option<usize>>,
    indicator: Vec<bool>,
    n_classes: usize,
}

impl Dataset {
    /// Builds a dataset from row-major features (`n * dim` values).
    pub fn from_parts(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<Option<usize>>,
        indicator: Vec<bool>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if n_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if features.len() != n * dim {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: n * dim,
                actual: features.len(),
            });
        }
        if indicator.len() != n {
            return Err(Error::DimensionMismatch {
                what: "indicator",
                expected: n,
                actual: indicator.len(),
            });
        }
        Ok(Self {
            features,
            dim,
            labels,
            indicator,
            n_classes,
        })
    }

    /// Builds a dataset whose indicator is derived from label presence.
    pub fn from_labels(features: Vec<f64>, dim: usize, labels: Vec<Option<usize>>, n_classes: usize) -> Result<Self> {
        let indicator = labels.iter().map(Option::is_some).collect();
        Self::from_parts(features, dim, labels, indicator, n_classes)
    }

    /// Builds a dataset with every label observed.
    pub fn fully_labeled(features: Vec<f64>, dim: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::from_labels(features, dim, labels.into_iter().map(Some).collect(), n_classes)
    }

    /// Checks every dataset invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        for (i, (label, &r)) in self.labels.iter().zip(&self.indicator).enumerate() {
            match (label, r) {
                (Some(_), false) => {
                    return Err(Error::InvalidSample {
                        index: i,
                        reason: "label present but indicator is 0".into(),
                    })
                }
                (None, true) => {
                    return Err(Error::InvalidSample {
                        index: i,
                        reason: "indicator is 1 but label is absent".into(),
                    })
                }
                (Some(y), true) if *y >= self.n_classes => {
                    return Err(Error::InvalidSample {
                        index: i,
                        reason: format!("label {} outside 1..={}", y + 1, self.n_classes),
                    })
                }
                _ => {}
            }
            if self.x(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSample {
                    index: i,
                    reason: "non-finite feature".into(),
                });
            }
        }
        if self.n_labeled() == 0 {
            return Err(Error::NoLabeledSamples);
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Feature row of sample `i`.
    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    #[inline]
    pub fn is_labeled(&self, i: usize) -> bool {
        self.indicator[i]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn n_labeled(&self) -> usize {
        self.indicator.iter().filter(|&&r| r).count()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.n() - self.n_labeled()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.indicator[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.indicator[i]).collect()
    }

    /// Number of labeled samples per class.
    pub fn labeled_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for (label, &r) in self.labels.iter().zip(&self.indicator) {
            if let (Some(y), true) = (label, r) {
                counts[*y] += 1;
            }
        }
        counts
    }

    /// Fraction of labeled samples, `n_labeled / n`.
    pub fn labeled_fraction(&self) -> f64 {
        self.n_labeled() as f64 / self.n() as f64
    }

    /// A new dataset holding the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indicator: indices.iter().map(|&i| self.indicator[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Per-class observation probabilities `phi[k] = P(r = 1 | y = k)`.
///
/// Components lie in `(0, 1]`: positivity is needed for inverse weighting,
/// and a fully observed class is allowed. Estimators return clamped values
/// strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Mechanism(Vec<f64>);

impl Mechanism {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.len() < 2 {
            return Err(Error::invalid("mechanism needs at least two classes"));
        }
        if let Some(k) = phi.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::invalid(format!(
                "mechanism component {} = {} outside (0, 1]",
                k + 1,
                phi[k]
            )));
        }
        Ok(Self(phi))
    }

    /// The same observation probability for every class.
    pub fn mcar(n_classes: usize, rate: f64) -> Result<Self> {
        Self::new(vec![rate; n_classes])
    }

    /// The MCAR mechanism implied by a dataset, `n_labeled / n` for all classes.
    pub fn mcar_of(dataset: &Dataset) -> Result<Self> {
        Self::mcar(dataset.n_classes(), dataset.labeled_fraction())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Clamps every component to `[eps, 1 - eps]`.
    pub fn clamped(&self, eps: f64) -> Mechanism {
        Mechanism(clamp_phi(&self.0, eps))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn clamp_phi(phi: &[f64], eps: f64) -> Vec<f64> {
    phi.iter().map(|p| p.clamp(eps, 1.0 - eps)).collect()
}

impl TryFrom<Vec<f64>> for Mechanism {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Mechanism::new(v)
    }
}

impl From<Mechanism> for Vec<f64> {
    fn from(m: Mechanism) -> Self {
        m.0
    }
}

impl std::ops::Index<usize> for Mechanism {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

/// Labels of every sample, including the hidden ones, plus the generating
/// mechanism when known.
///
/// The labels are only readable inside the crate; the public surface exposes
/// aggregate quantities needed for reporting. Estimators never take this
/// type as input.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedTruth {
    labels: Vec<usize>,
    phi_star: Option<Vec<f64>>,
    n_classes: usize,
}

impl SealedTruth {
    pub fn new(labels: Vec<usize>, n_classes: usize, phi_star: Option<Vec<f64>>) -> Result<Self> {
        if let Some(i) = labels.iter().position(|&y| y >= n_classes) {
            return Err(Error::InvalidSample {
                index: i,
                reason: format!("true label {} outside 1..={}", labels[i] + 1, n_classes),
            });
        }
        if let Some(phi) = &phi_star {
            if phi.len() != n_classes {
                return Err(Error::DimensionMismatch {
                    what: "phi_star",
                    expected: n_classes,
                    actual: phi.len(),
                });
            }
        }
        Ok(Self {
            labels,
            phi_star,
            n_classes,
        })
    }

    /// Truth of a dataset whose labels are all present.
    pub fn from_complete(dataset: &Dataset) -> Result<Self> {
        let labels = dataset
            .labels()
            .iter()
            .enumerate()
            .map(|(i, y)| {
                y.ok_or_else(|| Error::InvalidSample {
                    index: i,
                    reason: "label required".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, dataset.n_classes(), None)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// The mechanism that generated the mask, when the scenario defines one.
    pub fn phi_star(&self) -> Option<&[f64]> {
        self.phi_star.as_deref()
    }

    /// Number of samples per true class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub(crate) fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub(crate) fn with_phi_star(mut self, phi: Vec<f64>) -> Self {
        self.phi_star = Some(phi);
        self
    }
}
