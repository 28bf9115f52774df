//! Synthetic datasets and label-masking processes.
//!
//! A fully labeled pool is drawn from a Gaussian mixture, then a
//! [`ScenarioSpec`] decides which labels stay observed. The hidden labels
//! go to a [`SealedTruth`] so estimators cannot see them.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mechanism, SealedTruth};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};
use crate::rng::Rng;

/// Which samples of a geometrically imbalanced scenario are kept unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImbalanceSide {
    /// Every non-selected sample stays in the dataset, unlabeled.
    Labeled,
    /// The unlabeled samples also follow a geometric profile; the rest of
    /// the pool is dropped.
    UnlabeledToo { n1: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioKind {
    Mcar {
        rate: f64,
    },
    ClassBernoulli {
        phi: Vec<f64>,
    },
    GeometricImbalance {
        n1: usize,
        gamma: f64,
        #[serde(default = "default_side")]
        side: ImbalanceSide,
    },
    Composed {
        p_r_given_s: Vec<f64>,
        p_s_given_y: Vec<Vec<f64>>,
    },
}

fn default_side() -> ImbalanceSide {
    ImbalanceSide::Labeled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub kind: ScenarioKind,
    /// Offset added to the run seed for the masking stream, so that masks
    /// can vary while the features stay fixed.
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self { kind, seed: 0 }
    }

    /// Two classes (benign, malignant) masked through a five-level
    /// detection-difficulty score: scores 1-3 are observed with probability
    /// 0.1, scores 4-5 with probability 0.9.
    ///
    /// The benign score profile gives `phi = 0.57` (43% missing). The
    /// malignant profile puts all its mass on the easy scores, which gives
    /// the largest attainable value `phi = 0.9` (10% missing).
    pub fn nodule_preset() -> Self {
        Self::new(ScenarioKind::Composed {
            p_r_given_s: vec![0.1, 0.1, 0.1, 0.9, 0.9],
            p_s_given_y: vec![vec![0.15, 0.15, 0.1125, 0.3, 0.2875], vec![0.0, 0.0, 0.0, 0.35, 0.65]],
        })
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match &self.kind {
            ScenarioKind::Mcar { rate } => {
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::invalid("MCAR rate must lie in [0, 1]"));
                }
            }
            ScenarioKind::ClassBernoulli { phi } => {
                check_len("phi", phi.len(), n_classes)?;
                if phi.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::invalid("phi components must lie in [0, 1]"));
                }
            }
            ScenarioKind::GeometricImbalance { n1, gamma, side } => {
                geometric_counts(*n1, *gamma, n_classes)?;
                if let ImbalanceSide::UnlabeledToo { n1, gamma } = side {
                    geometric_counts(*n1, *gamma, n_classes)?;
                }
            }
            ScenarioKind::Composed {
                p_r_given_s,
                p_s_given_y,
            } => {
                check_len("p_s_given_y rows", p_s_given_y.len(), n_classes)?;
                check_composed(p_r_given_s, p_s_given_y)?;
            }
        }
        Ok(())
    }
}

fn check_len(what: &'static str, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::DimensionMismatch { what, expected, actual });
    }
    Ok(())
}

fn check_composed(p_r_given_s: &[f64], p_s_given_y: &[Vec<f64>]) -> Result<()> {
    if p_r_given_s.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("p(r|s) must lie in [0, 1]"));
    }
    for (y, row) in p_s_given_y.iter().enumerate() {
        check_len("p(s|y) row", row.len(), p_r_given_s.len())?;
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("p(s|y={}) is not a distribution", y + 1)));
        }
    }
    Ok(())
}

/// Per-class counts `round(n1 * gamma^(-(k-1)/(K-1)))`, ties to even,
/// floored at 1.
pub fn geometric_counts(n1: usize, gamma: f64, n_classes: usize) -> Result<Vec<usize>> {
    if n1 == 0 {
        return Err(Error::invalid("n1 must be at least 1"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma must be positive"));
    }
    if n_classes < 2 {
        return Err(Error::invalid("at least two classes are required"));
    }
    let last = (n_classes - 1) as f64;
    Ok((0..n_classes)
        .map(|k| {
            let v = n1 as f64 * gamma.powf(-(k as f64) / last);
            (v.round_ties_even() as usize).max(1)
        })
        .collect())
}

/// `phi_y = sum_s p(r=1|s) p(s|y)`.
pub fn compose_mechanism(p_r_given_s: &[f64], p_s_given_y: &[Vec<f64>]) -> Result<Mechanism> {
    check_composed(p_r_given_s, p_s_given_y)?;
    Mechanism::new(
        p_s_given_y
            .iter()
            .map(|row| row.iter().zip(p_r_given_s).map(|(a, b)| a * b).sum())
            .collect(),
    )
}

/// Masks a fully labeled dataset. Returns the masked dataset and the sealed
/// truth (all labels plus the generating mechanism).
pub fn apply_mask(pool: &Dataset, spec: &ScenarioSpec, rng: &mut Rng) -> Result<(Dataset, SealedTruth)> {
    let k = pool.n_classes();
    spec.validate(k)?;
    let truth = SealedTruth::from_complete(pool)?;
    let labels = truth.labels().to_vec();

    let bernoulli =
        |phi: &[f64], rng: &mut Rng| -> Vec<bool> { labels.iter().map(|&y| rng.random::<f64>() < phi[y]).collect() };

    let (kept, observed, phi_star) = match &spec.kind {
        ScenarioKind::Mcar { rate } => {
            let phi = vec![*rate; k];
            ((0..pool.n()).collect(), bernoulli(&phi, rng), phi)
        }
        ScenarioKind::ClassBernoulli { phi } => ((0..pool.n()).collect(), bernoulli(phi, rng), phi.clone()),
        ScenarioKind::Composed {
            p_r_given_s,
            p_s_given_y,
        } => {
            let phi = compose_mechanism(p_r_given_s, p_s_given_y)?.into_vec();
            ((0..pool.n()).collect(), bernoulli(&phi, rng), phi)
        }
        ScenarioKind::GeometricImbalance { n1, gamma, side } => {
            let lab_counts = geometric_counts(*n1, *gamma, k)?;
            let unl_counts = match side {
                ImbalanceSide::Labeled => None,
                ImbalanceSide::UnlabeledToo { n1, gamma } => Some(geometric_counts(*n1, *gamma, k)?),
            };
            select_per_class(&labels, k, &lab_counts, unl_counts.as_deref(), rng)?
        }
    };

    let sub = pool.subset(&kept);
    let masked_labels = sub
        .labels()
        .iter()
        .zip(&observed)
        .map(|(y, &r)| if r { *y } else { None })
        .collect();
    let dataset = Dataset::from_labels(sub.features().to_vec(), sub.dim(), masked_labels, k)?;
    dataset.validate()?;
    let truth = SealedTruth::new(kept.iter().map(|&i| labels[i]).collect(), k, None)?.with_phi_star(phi_star);
    Ok((dataset, truth))
}

type Selection = (Vec<usize>, Vec<bool>, Vec<f64>);

fn select_per_class(
    labels: &[usize],
    k: usize,
    lab_counts: &[usize],
    unl_counts: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<Selection> {
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    // 0 = dropped, 1 = unlabeled, 2 = labeled
    let mut role = vec![if unl_counts.is_some() { 0u8 } else { 1u8 }; labels.len()];
    let mut phi_star = Vec::with_capacity(k);
    for (y, members) in by_class.iter().enumerate() {
        let want_u = unl_counts.map_or(0, |u| u[y]);
        let need = lab_counts[y] + want_u;
        if members.len() < need {
            return Err(Error::invalid(format!(
                "class {} has {} samples, {} requested",
                y + 1,
                members.len(),
                need
            )));
        }
        let picked = index::sample(rng, members.len(), need);
        for (j, pos) in picked.iter().enumerate() {
            role[members[pos]] = if j < lab_counts[y] { 2 } else { 1 };
        }
        let pool_size = if unl_counts.is_some() { need } else { members.len() };
        phi_star.push(lab_counts[y] as f64 / pool_size as f64);
    }
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| role[i] > 0).collect();
    let observed = kept.iter().map(|&i| role[i] == 2).collect();
    Ok((kept, observed, phi_star))
}

/// Class-conditional Gaussians `x | y=k ~ N(mean_k, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub counts: Vec<usize>,
}

impl GaussianMixtureSpec {
    /// Means at pairwise distance `separation`: on scaled unit vectors when
    /// `dim >= K`, on a circle in the first two coordinates otherwise
    /// (on a line for `dim == 1`).
    pub fn separated(n_classes: usize, dim: usize, separation: f64, sigma: f64, counts: Vec<usize>) -> Self {
        let means = (0..n_classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                if dim >= n_classes {
                    m[k] = separation / std::f64::consts::SQRT_2;
                } else if dim == 1 || n_classes == 2 {
                    m[0] = separation * k as f64;
                } else {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / n_classes as f64;
                    let radius = separation / (2.0 * (std::f64::consts::PI / n_classes as f64).sin());
                    m[0] = radius * angle.cos();
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect();
        Self { means, sigma, counts }
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes();
        if k < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("means must share a positive dimension"));
        }
        check_len("counts", self.counts.len(), k)?;
        if self.counts.contains(&0) {
            return Err(Error::invalid("class counts must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be positive"));
        }
        Ok(())
    }

    /// The exact posterior `p(y | x)` of the mixture, with class
    /// proportions given by the counts. It is a linear softmax.
    pub fn bayes_params(&self) -> Result<ModelParams> {
        let total: usize = self.counts.iter().sum();
        let prior: Vec<f64> = self.counts.iter().map(|&c| c as f64 / total as f64).collect();
        self.bayes_params_with_prior(&prior)
    }

    pub fn bayes_params_with_prior(&self, prior: &[f64]) -> Result<ModelParams> {
        self.validate()?;
        let (k, d) = (self.n_classes(), self.dim());
        check_len("prior", prior.len(), k)?;
        let s2 = self.sigma * self.sigma;
        let mut params = Vec::with_capacity(k * d + k);
        for m in &self.means {
            params.extend(m.iter().map(|v| v / s2));
        }
        for (m, p) in self.means.iter().zip(prior) {
            let sq: f64 = m.iter().map(|v| v * v).sum();
            params.push(-sq / (2.0 * s2) + p.ln());
        }
        ModelParams::from_vec(Architecture::LinearSoftmax, d, k, params)
    }
}

/// Draws a fully labeled dataset from the mixture, class by class.
pub fn synth_gaussian_mixture(spec: &GaussianMixtureSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.dim();
    let n: usize = spec.counts.iter().sum();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (k, (&count, mean)) in spec.counts.iter().zip(&spec.means).enumerate() {
        for _ in 0..count {
            for m in mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + spec.sigma * z);
            }
            labels.push(k);
        }
    }
    Dataset::fully_labeled(features, d, labels, spec.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcartest::chi2_sf;
    use crate::rng;

    fn pool(counts: Vec<usize>, seed: u64) -> Dataset {
        let spec = GaussianMixtureSpec::separated(counts.len(), 2, 3.0, 1.0, counts);
        synth_gaussian_mixture(&spec, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn geometric_balanced_and_tail() {
        assert_eq!(geometric_counts(400, 1.0, 10).unwrap(), vec![400; 10]);
        let c = geometric_counts(400, 10.0, 10).unwrap();
        assert_eq!(c[0], 400);
        assert_eq!(c[9], 40);
        assert!(geometric_counts(400, 0.0, 10).is_err());
        assert!(geometric_counts(400, 2.0, 1).is_err());
    }

    #[test]
    fn geometric_total_matches_direct_sum() {
        let direct: f64 = (0..10).map(|k| 400.0 * 10f64.powf(-(k as f64) / 9.0)).sum();
        let total: usize = geometric_counts(400, 10.0, 10).unwrap().iter().sum();
        assert!((total as f64 - direct).abs() <= 5.0, "{total} vs {direct}");
        // rounded terms: 400 310 240 186 144 111 86 67 52 40
        assert_eq!(total, 1636);
    }

    #[test]
    fn geometric_floor_is_one() {
        let c = geometric_counts(1, 1000.0, 3).unwrap();
        assert_eq!(c, vec![1, 1, 1]);
    }

    #[test]
    fn compose_uniform_and_point_mass() {
        let prs = [0.1, 0.2, 0.6];
        let m = compose_mechanism(&prs, &[vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]]).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-12 && (m[1] - 0.3).abs() < 1e-12);
        let m = compose_mechanism(&prs, &[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(m.as_slice(), &[0.6, 0.2]);
        assert!(compose_mechanism(&prs, &[vec![0.5, 0.5]]).is_err());
        assert!(compose_mechanism(&prs, &[vec![0.5, 0.6, 0.0]]).is_err());
    }

    #[test]
    fn nodule_preset_mechanism() {
        let ScenarioKind::Composed {
            p_r_given_s,
            p_s_given_y,
        } = ScenarioSpec::nodule_preset().kind
        else {
            unreachable!()
        };
        let m = compose_mechanism(&p_r_given_s, &p_s_given_y).unwrap();
        // 0.1 * 0.4125 + 0.9 * 0.5875 by hand
        assert!((m[0] - 0.57).abs() < 1e-12);
        assert!((m[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn all_observed_and_none_observed() {
        let p = pool(vec![20, 20], 1);
        let spec = ScenarioSpec::new(ScenarioKind::ClassBernoulli { phi: vec![1.0, 1.0] });
        let (ds, _) = apply_mask(&p, &spec, &mut rng::seeded(2)).unwrap();
        assert_eq!(ds.n_labeled(), 40);
        let spec = ScenarioSpec::new(ScenarioKind::ClassBernoulli { phi: vec![0.0, 0.0] });
        assert!(matches!(
            apply_mask(&p, &spec, &mut rng::seeded(2)),
            Err(Error::NoLabeledSamples)
        ));
    }

    #[test]
    fn bernoulli_frequencies() {
        let p = pool(vec![100_000, 100_000], 3);
        let spec = ScenarioSpec::new(ScenarioKind::ClassBernoulli { phi: vec![0.5, 0.1] });
        let (ds, truth) = apply_mask(&p, &spec, &mut rng::seeded(4)).unwrap();
        let counts = ds.labeled_counts();
        let totals = truth.class_counts();
        assert!((counts[0] as f64 / totals[0] as f64 - 0.5).abs() < 0.01);
        assert!((counts[1] as f64 / totals[1] as f64 - 0.1).abs() < 0.01);
        assert_eq!(truth.phi_star(), Some(&[0.5, 0.1][..]));
    }

    #[test]
    fn geometric_selects_exact_counts() {
        let p = pool(vec![100, 100, 100], 5);
        let spec = ScenarioSpec::new(ScenarioKind::GeometricImbalance {
            n1: 40,
            gamma: 4.0,
            side: ImbalanceSide::Labeled,
        });
        let (ds, truth) = apply_mask(&p, &spec, &mut rng::seeded(6)).unwrap();
        assert_eq!(ds.labeled_counts(), vec![40, 20, 10]);
        assert_eq!(ds.n(), 300);
        assert_eq!(truth.phi_star().unwrap(), &[0.4, 0.2, 0.1]);

        let spec = ScenarioSpec::new(ScenarioKind::GeometricImbalance {
            n1: 40,
            gamma: 4.0,
            side: ImbalanceSide::UnlabeledToo { n1: 20, gamma: 0.25 },
        });
        let (ds, truth) = apply_mask(&p, &spec, &mut rng::seeded(6)).unwrap();
        assert_eq!(truth.class_counts(), vec![60, 60, 90]);
        assert_eq!(ds.labeled_counts(), vec![40, 20, 10]);
    }

    #[test]
    fn geometric_rejects_small_class() {
        let p = pool(vec![10, 10], 5);
        let spec = ScenarioSpec::new(ScenarioKind::GeometricImbalance {
            n1: 11,
            gamma: 2.0,
            side: ImbalanceSide::Labeled,
        });
        assert!(apply_mask(&p, &spec, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn mask_is_deterministic() {
        let p = pool(vec![500, 500], 7);
        let spec = ScenarioSpec::new(ScenarioKind::ClassBernoulli { phi: vec![0.3, 0.6] });
        let a = apply_mask(&p, &spec, &mut rng::seeded(9)).unwrap();
        let b = apply_mask(&p, &spec, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_independent_of_features_given_label() {
        let p = pool(vec![20_000, 20_000], 8);
        let spec = ScenarioSpec::new(ScenarioKind::ClassBernoulli { phi: vec![0.7, 0.2] });
        let (ds, truth) = apply_mask(&p, &spec, &mut rng::seeded(10)).unwrap();
        for class in 0..2 {
            let idx: Vec<usize> = (0..ds.n()).filter(|&i| truth.labels()[i] == class).collect();
            let mut xs: Vec<f64> = idx.iter().map(|&i| ds.x(i)[1]).collect();
            xs.sort_by(f64::total_cmp);
            let median = xs[xs.len() / 2];
            // 2x2 table: (above median, observed)
            let mut table = [[0f64; 2]; 2];
            for &i in &idx {
                table[(ds.x(i)[1] > median) as usize][ds.is_labeled(i) as usize] += 1.0;
            }
            let total: f64 = table.iter().flatten().sum();
            let mut stat = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let row: f64 = table[a].iter().sum();
                    let col = table[0][b] + table[1][b];
                    let e = row * col / total;
                    stat += (table[a][b] - e).powi(2) / e;
                }
            }
            assert!(chi2_sf(stat, 1) > 0.01, "class {class}: stat {stat}");
        }
    }

    #[test]
    fn mixture_zero_noise_and_frequencies() {
        let spec = GaussianMixtureSpec {
            means: vec![vec![1.0, -2.0], vec![3.0, 0.5]],
            sigma: 1e-300,
            counts: vec![50, 150],
        };
        let ds = synth_gaussian_mixture(&spec, &mut rng::seeded(1)).unwrap();
        assert_eq!(ds.n(), 200);
        for i in 0..ds.n() {
            let y = ds.label(i).unwrap();
            assert_eq!(ds.x(i), spec.means[y].as_slice());
        }
        let truth = SealedTruth::from_complete(&ds).unwrap();
        assert_eq!(truth.class_counts(), vec![50, 150]);
    }

    #[test]
    fn bayes_params_match_posterior() {
        let spec = GaussianMixtureSpec::separated(3, 2, 2.0, 0.8, vec![10, 20, 30]);
        let theta = spec.bayes_params().unwrap();
        let x = [0.3, -0.4];
        let p = theta.predict_proba(&x).unwrap();
        let dens: Vec<f64> = spec
            .means
            .iter()
            .zip(&spec.counts)
            .map(|(m, &c)| {
                let sq: f64 = m.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                c as f64 * (-sq / (2.0 * 0.64)).exp()
            })
            .collect();
        let z: f64 = dens.iter().sum();
        for k in 0..3 {
            assert!((p[k] - dens[k] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn scenario_spec_round_trips_through_json() {
        let spec = ScenarioSpec::nodule_preset();
        let s = serde_json::to_string(&spec).unwrap();
        let back: ScenarioSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
