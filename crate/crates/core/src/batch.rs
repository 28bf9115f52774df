//! Stratified minibatches: one batch from the labeled samples and one from
//! the unlabeled samples per step.
//!
//! A [`View`] attaches per-sample weights so that a weighted sum over the
//! batch is an unbiased estimate of the corresponding full-data mean
//! (`1/n` times the full sum). On the full dataset both weights are `1/n`.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::rng::Rng;

/// A weighted subset of a dataset.
#[derive(Debug, Clone)]
pub(crate) struct View<'a> {
    pub ds: &'a Dataset,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub w_labeled: f64,
    pub w_unlabeled: f64,
}

impl<'a> View<'a> {
    pub fn full(ds: &'a Dataset) -> Self {
        let n = ds.n() as f64;
        Self {
            ds,
            labeled: ds.labeled_indices(),
            unlabeled: ds.unlabeled_indices(),
            w_labeled: 1.0 / n,
            w_unlabeled: 1.0 / n,
        }
    }

    /// The full dataset with unit weights: weighted sums are plain sums.
    pub fn unit(ds: &'a Dataset) -> Self {
        Self {
            ds,
            labeled: ds.labeled_indices(),
            unlabeled: ds.unlabeled_indices(),
            w_labeled: 1.0,
            w_unlabeled: 1.0,
        }
    }

    /// Batches drawn from the labeled and unlabeled parts, reweighted by
    /// `(n_l / n) / |labeled|` and `(n_u / n) / |unlabeled|`.
    pub fn batch(ds: &'a Dataset, labeled: Vec<usize>, unlabeled: Vec<usize>) -> Self {
        let n = ds.n() as f64;
        let frac_l = ds.n_labeled() as f64 / n;
        let frac_u = ds.n_unlabeled() as f64 / n;
        let w_labeled = if labeled.is_empty() {
            0.0
        } else {
            frac_l / labeled.len() as f64
        };
        let w_unlabeled = if unlabeled.is_empty() {
            0.0
        } else {
            frac_u / unlabeled.len() as f64
        };
        Self {
            ds,
            labeled,
            unlabeled,
            w_labeled,
            w_unlabeled,
        }
    }

    /// Labeled indices followed by unlabeled indices.
    pub fn indices(&self) -> Vec<usize> {
        let mut all = self.labeled.clone();
        all.extend_from_slice(&self.unlabeled);
        all
    }
}

/// Cycles through shuffled labeled and unlabeled index lists.
///
/// An epoch is one pass over the larger of the two parts; the smaller part
/// is reshuffled whenever it runs out. Both parts are reshuffled at the
/// start of every epoch. With no batch size, every step returns the full
/// dataset.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    batch_size: Option<usize>,
    pos_l: usize,
    pos_u: usize,
}

impl BatchSampler {
    pub fn new(ds: &Dataset, batch_size: Option<usize>) -> Self {
        Self {
            labeled: ds.labeled_indices(),
            unlabeled: ds.unlabeled_indices(),
            batch_size: batch_size.filter(|&b| b > 0),
            pos_l: 0,
            pos_u: 0,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.batch_size {
            None => 1,
            Some(b) => self.labeled.len().max(self.unlabeled.len()).div_ceil(b).max(1),
        }
    }

    pub fn start_epoch(&mut self, rng: &mut Rng) {
        if self.batch_size.is_some() {
            self.labeled.shuffle(rng);
            self.unlabeled.shuffle(rng);
        }
        self.pos_l = 0;
        self.pos_u = 0;
    }

    /// Next (labeled, unlabeled) index batches.
    pub fn next_batch(&mut self, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        match self.batch_size {
            None => (self.labeled.clone(), self.unlabeled.clone()),
            Some(b) => {
                let l = take_cyclic(&mut self.labeled, &mut self.pos_l, b, rng);
                let u = take_cyclic(&mut self.unlabeled, &mut self.pos_u, b, rng);
                (l, u)
            }
        }
    }
}

fn take_cyclic(items: &mut [usize], pos: &mut usize, b: usize, rng: &mut Rng) -> Vec<usize> {
    if items.is_empty() {
        return Vec::new();
    }
    let b = b.min(items.len());
    if *pos + b > items.len() {
        items.shuffle(rng);
        *pos = 0;
    }
    let out = items[*pos..*pos + b].to_vec();
    *pos += b;
    out
}
