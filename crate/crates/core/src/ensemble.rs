//! Per-topic one-vs-rest linear SVMs and pooled prediction.
//!
//! Each (class, topic) slot holds a linear classifier trained by stochastic
//! subgradient descent on the hinge loss, using only the training samples
//! routed to that topic. Test descriptors are scored by every topic and the
//! decisions are pooled across topics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topics::{assign_topic, KMeansModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// L2 regularization strength.
    pub lambda: f64,
    /// Initial learning rate.
    pub eta0: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.eta0 > 0.0 && self.epochs >= 1) {
            return Err(Error::Argument(format!("invalid SGD config {self:?}")));
        }
        Ok(())
    }
}

/// λ ∈ {1e-5, 1e-4, 1e-3} × η0 ∈ {0.1, 1.0}, 30 epochs.
pub fn default_sgd_grid(seed: u64) -> Vec<SgdConfig> {
    let mut grid = Vec::new();
    for lambda in [1e-5, 1e-4, 1e-3] {
        for eta0 in [0.1, 1.0] {
            grid.push(SgdConfig {
                lambda,
                eta0,
                epochs: 30,
                seed,
            });
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    /// Classifier that ignores its input and always returns `value`.
    pub fn constant(dim: usize, value: f64) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: value,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(λ/2)‖w‖² + mean hinge loss` over labeled samples (`y ∈ {−1, +1}`).
pub fn svm_objective(clf: &LinearClassifier, samples: &[(&[f64], f64)], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * dot(&clf.weights, &clf.weights);
    let hinge: f64 = samples.iter().map(|(x, y)| (1.0 - y * clf.decision(x)).max(0.0)).sum();
    reg + hinge / samples.len() as f64
}

fn check_dims(samples: &[(&[f64], f64)]) -> Result<usize> {
    let dim = samples[0].0.len();
    if let Some((bad, _)) = samples.iter().find(|(x, _)| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    Ok(dim)
}

/// SGD on the regularized hinge loss with step `η0 / (1 + η0·λ·t)` and a
/// seeded shuffle per epoch. The bias is not regularized. Returns the final
/// iterate and the training objective before training and after each epoch.
pub fn train_binary_traced(
    positives: &[&[f64]],
    negatives: &[&[f64]],
    cfg: &SgdConfig,
) -> Result<(LinearClassifier, Vec<f64>)> {
    cfg.validate()?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::DegenerateTraining(format!(
            "{} positives and {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let samples: Vec<(&[f64], f64)> = positives
        .iter()
        .map(|x| (*x, 1.0))
        .chain(negatives.iter().map(|x| (*x, -1.0)))
        .collect();
    let dim = check_dims(&samples)?;

    let mut clf = LinearClassifier::constant(dim, 0.0);
    let mut trace = vec![svm_objective(&clf, &samples, cfg.lambda)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut t = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = samples[i];
            let eta = cfg.eta0 / (1.0 + cfg.eta0 * cfg.lambda * t);
            let margin = y * clf.decision(x);
            let shrink = 1.0 - eta * cfg.lambda;
            if margin < 1.0 {
                for (w, v) in clf.weights.iter_mut().zip(x) {
                    *w = shrink * *w + eta * y * v;
                }
                clf.bias += eta * y;
            } else {
                clf.weights.iter_mut().for_each(|w| *w *= shrink);
            }
            t += 1.0;
        }
        trace.push(svm_objective(&clf, &samples, cfg.lambda));
    }
    Ok((clf, trace))
}

pub fn train_binary(positives: &[&[f64]], negatives: &[&[f64]], cfg: &SgdConfig) -> Result<LinearClassifier> {
    train_binary_traced(positives, negatives, cfg).map(|(clf, _)| clf)
}

/// Deterministic per-slot seed.
fn slot_seed(seed: u64, class: usize, topic: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ ((class as u64) << 32 | topic as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of training one (class, topic) slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Trained,
    /// No positives in the topic: constant decision −1.
    NoPositives,
    /// No negatives in the topic: constant decision +1.
    NoNegatives,
}

/// One-vs-rest classifiers for every class. Classes without positives or
/// negatives get a constant classifier instead of failing.
pub fn train_one_vs_rest(
    samples: &[&[f64]],
    labels: &[usize],
    n_classes: usize,
    dim: usize,
    cfg: &SgdConfig,
    topic: usize,
) -> Result<Vec<(LinearClassifier, SlotKind)>> {
    (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let (pos, neg): (Vec<(&[f64], usize)>, Vec<_>) = samples
                .iter()
                .copied()
                .zip(labels.iter().copied())
                .partition(|(_, l)| *l == c);
            if pos.is_empty() {
                return Ok((LinearClassifier::constant(dim, -1.0), SlotKind::NoPositives));
            }
            if neg.is_empty() {
                return Ok((LinearClassifier::constant(dim, 1.0), SlotKind::NoNegatives));
            }
            let pos: Vec<&[f64]> = pos.into_iter().map(|(x, _)| x).collect();
            let neg: Vec<&[f64]> = neg.into_iter().map(|(x, _)| x).collect();
            let slot_cfg = SgdConfig {
                seed: slot_seed(cfg.seed, c, topic),
                ..*cfg
            };
            Ok((train_binary(&pos, &neg, &slot_cfg)?, SlotKind::Trained))
        })
        .collect()
}

/// Argmax with ties going to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fold index of each sample: samples of each class, in order, are dealt
/// round-robin so every fold gets a share of every class where possible.
pub fn stratified_folds(labels: &[usize], n_classes: usize, folds: usize) -> Vec<usize> {
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..n_classes {
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == c) {
            fold_of[i] = next % folds;
            next += 1;
        }
    }
    fold_of
}

/// Picks the grid entry with the best mean validation accuracy under
/// stratified k-fold cross-validation. Ties keep the earlier entry.
pub fn cross_validate(
    samples: &[&[f64]],
    labels: &[usize],
    n_classes: usize,
    grid: &[SgdConfig],
    folds: usize,
) -> Result<SgdConfig> {
    let first = *grid
        .first()
        .ok_or_else(|| Error::Argument("empty hyperparameter grid".into()))?;
    if folds < 2 {
        return Err(Error::Argument("cross-validation needs at least 2 folds".into()));
    }
    if grid.len() == 1 || samples.len() < 2 {
        return Ok(first);
    }
    let dim = samples[0].len();
    let fold_of = stratified_folds(labels, n_classes, folds);
    let accuracies = grid
        .par_iter()
        .map(|cfg| {
            let mut total = 0.0;
            let mut used = 0;
            for fold in 0..folds {
                let (mut train_x, mut train_y, mut val) = (Vec::new(), Vec::new(), Vec::new());
                for (i, (&x, &y)) in samples.iter().zip(labels).enumerate() {
                    if fold_of[i] == fold {
                        val.push((x, y));
                    } else {
                        train_x.push(x);
                        train_y.push(y);
                    }
                }
                if val.is_empty() || train_x.is_empty() {
                    continue;
                }
                let classifiers = train_one_vs_rest(&train_x, &train_y, n_classes, dim, cfg, fold)?;
                let correct = val
                    .iter()
                    .filter(|(x, y)| {
                        let scores: Vec<f64> = classifiers.iter().map(|(c, _)| c.decision(x)).collect();
                        argmax(&scores) == *y
                    })
                    .count();
                total += correct as f64 / val.len() as f64;
                used += 1;
            }
            Ok(if used == 0 { 0.0 } else { total / used as f64 })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(grid[argmax(&accuracies)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub grid: Vec<SgdConfig>,
    pub folds: usize,
    /// Choose one config by cross-validation on all training data instead of
    /// per topic.
    pub global_cv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub topic_sizes: Vec<usize>,
    /// Hyperparameters used in each topic.
    pub configs: Vec<SgdConfig>,
    /// `[class][topic]`
    pub slots: Vec<Vec<SlotKind>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEnsemble {
    pub topics: KMeansModel,
    /// `[class][topic]`
    pub classifiers: Vec<Vec<LinearClassifier>>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// Pooled decision per class.
    pub scores: Vec<f64>,
}

impl TopicEnsemble {
    pub fn n_classes(&self) -> usize {
        self.classifiers.len()
    }

    pub fn n_topics(&self) -> usize {
        self.topics.n_clusters()
    }

    pub fn dim(&self) -> usize {
        self.topics.dim()
    }

    /// Raw decisions `[class][topic]`.
    pub fn decisions(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(self
            .classifiers
            .iter()
            .map(|row| row.iter().map(|clf| clf.decision(x)).collect())
            .collect())
    }

    pub fn predict_pooled(&self, x: &[f64], pooling: Pooling) -> Result<Prediction> {
        let scores: Vec<f64> = self
            .decisions(x)?
            .into_iter()
            .map(|row| match pooling {
                Pooling::Average => row.iter().sum(),
                Pooling::Max => row.into_iter().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        Ok(Prediction {
            class: argmax(&scores),
            scores,
        })
    }
}

/// Class with the largest decision summed over all topics.
pub fn predict(ens: &TopicEnsemble, x: &[f64]) -> Result<Prediction> {
    ens.predict_pooled(x, Pooling::Average)
}

/// Class with the largest decision of any single topic.
pub fn predict_max_pool(ens: &TopicEnsemble, x: &[f64]) -> Result<Prediction> {
    ens.predict_pooled(x, Pooling::Max)
}

/// Routes each training descriptor to its topic and trains one-vs-rest
/// classifiers per topic.
pub fn train_ensemble(
    descriptors: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    topics: &KMeansModel,
    cfg: &EnsembleConfig,
) -> Result<TopicEnsemble> {
    if descriptors.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: descriptors.len(),
            actual: labels.len(),
        });
    }
    if descriptors.is_empty() {
        return Err(Error::DegenerateTraining("no training descriptors".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Argument(format!("label {bad} out of range")));
    }
    let dim = topics.dim();
    let n_topics = topics.n_clusters();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    for (i, x) in descriptors.iter().enumerate() {
        members[assign_topic(topics, x)?.topic].push(i);
    }

    let all: Vec<&[f64]> = descriptors.iter().map(Vec::as_slice).collect();
    let global = if cfg.global_cv {
        Some(cross_validate(&all, labels, n_classes, &cfg.grid, cfg.folds)?)
    } else {
        None
    };

    let per_topic = members
        .iter()
        .enumerate()
        .map(|(d, idx)| {
            let xs: Vec<&[f64]> = idx.iter().map(|&i| all[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let chosen = match global {
                Some(c) => c,
                None if xs.is_empty() => *cfg
                    .grid
                    .first()
                    .ok_or_else(|| Error::Argument("empty hyperparameter grid".into()))?,
                None => cross_validate(&xs, &ys, n_classes, &cfg.grid, cfg.folds)?,
            };
            Ok((chosen, train_one_vs_rest(&xs, &ys, n_classes, dim, &chosen, d)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut classifiers = vec![Vec::with_capacity(n_topics); n_classes];
    let mut slots = vec![Vec::with_capacity(n_topics); n_classes];
    let mut configs = Vec::with_capacity(n_topics);
    for (chosen, row) in per_topic {
        configs.push(chosen);
        for (c, (clf, kind)) in row.into_iter().enumerate() {
            classifiers[c].push(clf);
            slots[c].push(kind);
        }
    }
    Ok(TopicEnsemble {
        topics: topics.clone(),
        classifiers,
        meta: TrainingMeta {
            topic_sizes: members.iter().map(Vec::len).collect(),
            configs,
            slots,
        },
    })
}
