//! Vote aggregation with the Dawid-Skene EM estimator.
//!
//! Annotators vote ordinal relation labels for every ordered task pair (the
//! row-major flattening of the correlation matrix). EM alternates between a
//! posterior over each item's true label and per-annotator confusion
//! matrices, the final labels are decoded winner-takes-all, and the decoded
//! vector is de-flattened into the correlation matrix used by the
//! meta-network.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::world::{class_index, VoteTable, CLASS_LABELS, NUM_CLASSES};
use crate::{Error, Result};

/// Floor applied to confusion and prior entries before taking logs. The
/// straight product form underflows around 30 annotators.
const LOG_FLOOR: f64 = 1e-12;

/// Per-annotator row-stochastic confusion matrices.
/// Entry (m, l, g) is P(annotator m reports class g | true class l).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionTensor {
    annotators: usize,
    probs: Vec<f64>,
}

impl ConfusionTensor {
    pub fn annotators(&self) -> usize {
        self.annotators
    }

    pub fn get(&self, annotator: usize, true_class: usize, reported: usize) -> f64 {
        self.probs[(annotator * NUM_CLASSES + true_class) * NUM_CLASSES + reported]
    }

    fn row(&self, annotator: usize, true_class: usize) -> &[f64] {
        let start = (annotator * NUM_CLASSES + true_class) * NUM_CLASSES;
        &self.probs[start..start + NUM_CLASSES]
    }
}

/// Per-item class probabilities, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPosterior {
    items: usize,
    probs: Vec<f64>,
}

impl LabelPosterior {
    /// Builds a posterior from raw row-major probabilities.
    pub fn from_probs(items: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != items * NUM_CLASSES {
            return Err(Error::DimensionMismatch {
                context: "posterior matrix",
                expected: items * NUM_CLASSES,
                found: probs.len(),
            });
        }
        Ok(LabelPosterior { items, probs })
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.probs[item * NUM_CLASSES..(item + 1) * NUM_CLASSES]
    }
}

/// Aggregated task-correlation matrix: decoded ordinal labels plus their
/// normalized (label / 3) form.
#[derive(Debug, Clone, PartialEq)]
pub struct Gamma {
    k: usize,
    raw: Vec<i8>,
    normalized: Vec<f64>,
}

impl Gamma {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn raw(&self) -> &[i8] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn raw_at(&self, i: usize, j: usize) -> i8 {
        self.raw[i * self.k + j]
    }

    pub fn normalized_at(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.k + j]
    }

    /// Reconstructs a Gamma from stored raw labels (used by file loading).
    pub fn from_raw(k: usize, raw: Vec<i8>) -> Result<Self> {
        if raw.len() != k * k {
            return Err(Error::DimensionMismatch {
                context: "gamma raw labels",
                expected: k * k,
                found: raw.len(),
            });
        }
        if let Some(&bad) = raw.iter().find(|&&l| class_index(l).is_none()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "gamma label {bad} outside {{-1,0,+1,+2,+3}}"
            )));
        }
        let normalized = raw.iter().map(|&l| l as f64 / 3.0).collect();
        Ok(Gamma { k, raw, normalized })
    }
}

/// Vote-frequency initialization: item posteriors from each item's empirical
/// vote frequencies, class prior from the global frequencies.
pub fn ds_initialize(votes: &VoteTable) -> Result<(LabelPosterior, [f64; NUM_CLASSES])> {
    let m = votes.annotators();
    let n = votes.items();
    let mut probs = vec![0.0; n * NUM_CLASSES];
    let mut prior = [0.0; NUM_CLASSES];
    for j in 0..n {
        let mut counts = [0usize; NUM_CLASSES];
        for a in 0..m {
            let c = class_index(votes.vote(a, j)).expect("vote tables hold valid labels");
            counts[c] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            let f = count as f64 / m as f64;
            probs[j * NUM_CLASSES + c] = f;
            prior[c] += f;
        }
    }
    for p in &mut prior {
        *p /= n as f64;
    }
    Ok((LabelPosterior { items: n, probs }, prior))
}

/// M step: re-estimates each annotator's confusion matrix from the current
/// posterior. Rows with zero posterior mass fall back to uniform.
pub fn ds_update_confusion(posterior: &LabelPosterior, votes: &VoteTable) -> ConfusionTensor {
    let m = votes.annotators();
    let n = votes.items();
    debug_assert_eq!(posterior.items(), n);
    let mut probs = vec![0.0; m * NUM_CLASSES * NUM_CLASSES];
    for a in 0..m {
        for l in 0..NUM_CLASSES {
            let mut row = [0.0; NUM_CLASSES];
            let mut mass = 0.0;
            for j in 0..n {
                let w = posterior.row(j)[l];
                let g = class_index(votes.vote(a, j)).expect("valid labels");
                row[g] += w;
                mass += w;
            }
            let out = &mut probs
                [(a * NUM_CLASSES + l) * NUM_CLASSES..(a * NUM_CLASSES + l + 1) * NUM_CLASSES];
            if mass > 0.0 {
                for (o, r) in out.iter_mut().zip(row) {
                    *o = r / mass;
                }
            } else {
                out.fill(1.0 / NUM_CLASSES as f64);
            }
        }
    }
    ConfusionTensor {
        annotators: m,
        probs,
    }
}

/// E step: posterior over each item's true class given the confusions,
/// computed in log space with a floor on confusion and prior entries.
pub fn ds_update_posterior(
    confusion: &ConfusionTensor,
    votes: &VoteTable,
    prior: &[f64; NUM_CLASSES],
) -> LabelPosterior {
    let m = votes.annotators();
    let n = votes.items();
    let mut probs = vec![0.0; n * NUM_CLASSES];
    for j in 0..n {
        let mut logp = [0.0; NUM_CLASSES];
        for (l, lp) in logp.iter_mut().enumerate() {
            let mut acc = math::ln(prior[l].max(LOG_FLOOR));
            for a in 0..m {
                let g = class_index(votes.vote(a, j)).expect("valid labels");
                acc += math::ln(confusion.get(a, l, g).max(LOG_FLOOR));
            }
            *lp = acc;
        }
        let max = logp.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut norm = 0.0;
        let row = &mut probs[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
        for (r, &lp) in row.iter_mut().zip(&logp) {
            *r = math::exp(lp - max);
            norm += *r;
        }
        for r in row.iter_mut() {
            *r /= norm;
        }
    }
    LabelPosterior { items: n, probs }
}

/// Marginal log-likelihood of the votes under (prior, confusion).
fn marginal_log_likelihood(
    confusion: &ConfusionTensor,
    votes: &VoteTable,
    prior: &[f64; NUM_CLASSES],
) -> f64 {
    let m = votes.annotators();
    let n = votes.items();
    let mut total = 0.0;
    for j in 0..n {
        let mut logp = [0.0; NUM_CLASSES];
        for (l, lp) in logp.iter_mut().enumerate() {
            let mut acc = math::ln(prior[l].max(LOG_FLOOR));
            for a in 0..m {
                let g = class_index(votes.vote(a, j)).expect("valid labels");
                acc += math::ln(confusion.get(a, l, g).max(LOG_FLOOR));
            }
            *lp = acc;
        }
        let max = logp.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let sum: f64 = logp.iter().map(|&lp| math::exp(lp - max)).sum();
        total += max + math::ln(sum);
    }
    total
}

/// Result of a full EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct DsOutcome {
    /// Winner-takes-all labels per item, ties broken toward the smaller
    /// class index in the order (-1, 0, +1, +2, +3).
    pub labels: Vec<i8>,
    pub confusion: ConfusionTensor,
    pub posterior: LabelPosterior,
    /// Marginal log-likelihood after each EM iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
}

/// Winner-takes-all decode of a posterior: argmax per row, ties broken
/// toward the smaller class index in the fixed order (-1, 0, +1, +2, +3).
pub fn winner_takes_all(posterior: &LabelPosterior) -> Vec<i8> {
    (0..posterior.items())
        .map(|j| {
            let row = posterior.row(j);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            CLASS_LABELS[best]
        })
        .collect()
}

fn one_hot_posterior(labels: &[i8]) -> LabelPosterior {
    let mut probs = vec![0.0; labels.len() * NUM_CLASSES];
    for (j, &l) in labels.iter().enumerate() {
        probs[j * NUM_CLASSES + class_index(l).expect("valid label")] = 1.0;
    }
    LabelPosterior {
        items: labels.len(),
        probs,
    }
}

/// Runs EM until the marginal log-likelihood improves by less than `tol`
/// or `max_iter` iterations.
///
/// Each iteration re-estimates the confusion tensor and class prior from
/// the winner-takes-all labels of the current posterior, then recomputes
/// the posterior. Feeding decoded labels (rather than the soft posterior)
/// into the M step keeps the never-voted-true "abstain" class pinned to its
/// uniform fallback row; with soft responsibilities, EM provably prefers
/// repurposing that orphan class as a second cluster for items with noisy
/// vote patterns, which corrupts the decoded labels.
pub fn ds_run(votes: &VoteTable, max_iter: usize, tol: f64) -> Result<DsOutcome> {
    if max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
    }
    let (mut posterior, _) = ds_initialize(votes)?;
    let n = posterior.items();
    let mut confusion;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let hard = one_hot_posterior(&winner_takes_all(&posterior));
        confusion = ds_update_confusion(&hard, votes);
        let mut prior = [0.0; NUM_CLASSES];
        for j in 0..n {
            for (p, &v) in prior.iter_mut().zip(hard.row(j)) {
                *p += v;
            }
        }
        for p in &mut prior {
            *p /= n as f64;
        }
        posterior = ds_update_posterior(&confusion, votes, &prior);
        let ll = marginal_log_likelihood(&confusion, votes, &prior);
        let done = trace.last().is_some_and(|&prev: &f64| ll - prev < tol);
        trace.push(ll);
        if done || iterations == max_iter {
            break;
        }
    }
    let labels = winner_takes_all(&posterior);
    Ok(DsOutcome {
        labels,
        confusion,
        posterior,
        loglik_trace: trace,
        iterations,
    })
}

/// De-flattens decoded labels into the K x K correlation matrix. The
/// diagonal is overridden to +3: self relation is definitional, not voted.
pub fn assemble_gamma(labels: &[i8], k: usize) -> Result<Gamma> {
    if labels.len() != k * k {
        return Err(Error::DimensionMismatch {
            context: "flattened labels",
            expected: k * k,
            found: labels.len(),
        });
    }
    let mut raw = labels.to_vec();
    for i in 0..k {
        raw[i * k + i] = 3;
    }
    Gamma::from_raw(k, raw)
}
