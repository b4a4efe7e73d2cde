//! Object occurrence model.
//!
//! For every object `o`, scene class `c` and detection threshold `θ` on a
//! fixed grid, the occurrence model stores the fraction of class-`c` training
//! images that contain `o` at least once with confidence `≥ θ`. Bayes' rule
//! turns those likelihoods into class posteriors `p(c|o;θ)`, which drive both
//! object selection and the semantic descriptors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DatasetManifest, ObjectVocabulary, SceneClassSet};

/// Ascending thresholds `min, min + step, ...` not exceeding `max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    min: f64,
    max: f64,
    step: f64,
    values: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && step.is_finite()) || step <= 0.0 || min >= max {
            return Err(Error::Argument(format!(
                "threshold grid needs min < max and step > 0 (got {min}, {max}, {step})"
            )));
        }
        // Tolerate accumulated rounding so that e.g. [0, 1] with step 0.05 has 21 points.
        let count = ((max - min) / step + 1e-9).floor() as usize + 1;
        if count < 2 {
            return Err(Error::Argument("threshold grid must have at least 2 points".into()));
        }
        let values = (0..count).map(|i| min + i as f64 * step).collect();
        Ok(Self { min, max, step, values })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the grid point nearest to `score` after clamping it into the
    /// grid range. Equidistant scores resolve to the lower point.
    pub fn nearest_index(&self, score: f64) -> usize {
        let last = self.values.len() - 1;
        if score.is_nan() || score <= self.values[0] {
            return 0;
        }
        if score >= self.values[last] {
            return last;
        }
        let lo = (((score - self.min) / self.step).floor() as usize).min(last);
        // Guard against floor landing one cell off because of rounding.
        let lo = if self.values[lo] > score {
            lo.saturating_sub(1)
        } else {
            lo
        };
        let hi = (lo + 1).min(last);
        if score - self.values[lo] <= self.values[hi] - score {
            lo
        } else {
            hi
        }
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid::new(0.0, 1.0, 0.05).expect("default grid is valid")
    }
}

/// `p(o|c;θ)` for every object, class and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceModel {
    pub vocabulary: ObjectVocabulary,
    pub classes: SceneClassSet,
    pub grid: ThresholdGrid,
    /// Laid out `[object][class][theta]`.
    probs: Vec<f64>,
}

impl OccurrenceModel {
    pub fn n_objects(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn prob(&self, object: usize, class: usize, theta: usize) -> f64 {
        self.probs[self.offset(object, class) + theta]
    }

    /// The `θ` curve for one (object, class) pair.
    pub fn curve(&self, object: usize, class: usize) -> &[f64] {
        let start = self.offset(object, class);
        &self.probs[start..start + self.grid.len()]
    }

    fn offset(&self, object: usize, class: usize) -> usize {
        (object * self.n_classes() + class) * self.grid.len()
    }

    /// Builds a model from raw `[object][class][theta]` probabilities.
    pub fn from_parts(
        vocabulary: ObjectVocabulary,
        classes: SceneClassSet,
        grid: ThresholdGrid,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let expected = vocabulary.len() * classes.len() * grid.len();
        if probs.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: probs.len(),
            });
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Model("occurrence probabilities must lie in [0, 1]".into()));
        }
        Ok(Self {
            vocabulary,
            classes,
            grid,
            probs,
        })
    }
}

/// Counts, per class, the images whose best detection of each object clears
/// each threshold. Soft records contribute their best patch score per object.
/// Unlabeled records are ignored.
pub fn build_occurrence_model(train: &DatasetManifest, grid: &ThresholdGrid) -> Result<OccurrenceModel> {
    let n_classes = train.classes.len();
    let class_sizes = train.class_counts();
    if let Some(c) = class_sizes.iter().position(|&n| n == 0) {
        return Err(Error::Model(format!(
            "class `{}` has no training images",
            train.classes.name(c)
        )));
    }
    let n_theta = grid.len();
    let labeled: Vec<_> = train
        .records
        .iter()
        .filter_map(|r| r.scene_class.map(|c| (c, r)))
        .collect();

    let class_sizes = &class_sizes;
    let probs: Vec<f64> = (0..train.vocabulary.len())
        .into_par_iter()
        .flat_map_iter(|object| {
            let mut counts = vec![0usize; n_classes * n_theta];
            for &(class, record) in &labeled {
                if let Some(best) = record.max_score(object) {
                    // Indicator is monotone in θ: count every grid point up to the score.
                    let above = grid.values().partition_point(|&t| t <= best);
                    for slot in &mut counts[class * n_theta..class * n_theta + above] {
                        *slot += 1;
                    }
                }
            }
            counts
                .into_iter()
                .enumerate()
                .map(move |(i, n)| n as f64 / class_sizes[i / n_theta] as f64)
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(OccurrenceModel {
        vocabulary: train.vocabulary.clone(),
        classes: train.classes.clone(),
        grid: grid.clone(),
        probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    weights: Vec<f64>,
}

impl ClassPrior {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Argument(
                "class prior weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("class prior sums to {total}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self {
            weights: vec![1.0 / n_classes as f64; n_classes],
        }
    }

    /// Training class frequencies.
    pub fn empirical(train: &DatasetManifest) -> Result<Self> {
        let counts = train.class_counts();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Model("no labeled training images".into()));
        }
        Ok(Self {
            weights: counts.iter().map(|&n| n as f64 / total as f64).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    Uniform,
    Empirical,
}

/// What a posterior cell holds when no class has any occurrence there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackRule {
    /// The class prior.
    Prior,
    /// The last non-fallback column at a lower threshold, or the prior if
    /// there is none.
    LastValid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub vocabulary: ObjectVocabulary,
    pub classes: SceneClassSet,
    pub grid: ThresholdGrid,
    pub prior: ClassPrior,
    pub fallback_rule: FallbackRule,
    /// Laid out `[object][theta][class]` so each column is contiguous.
    posteriors: Vec<f64>,
    /// `[object][theta]`
    fallback: Vec<bool>,
}

impl PosteriorModel {
    pub fn n_objects(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `p(·|o;θ_t)` over all classes.
    pub fn column(&self, object: usize, theta: usize) -> &[f64] {
        let c = self.n_classes();
        let start = (object * self.grid.len() + theta) * c;
        &self.posteriors[start..start + c]
    }

    pub fn posterior(&self, object: usize, class: usize, theta: usize) -> f64 {
        self.column(object, theta)[class]
    }

    pub fn is_fallback(&self, object: usize, theta: usize) -> bool {
        self.fallback[object * self.grid.len() + theta]
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|f| **f).count()
    }

    /// Posterior column at an arbitrary score, looked up at the nearest grid
    /// point after clamping into the grid range.
    pub fn posterior_at_score(&self, object: usize, score: f64) -> &[f64] {
        self.column(object, self.grid.nearest_index(score))
    }
}

pub fn build_posterior_model(oom: &OccurrenceModel, prior: &ClassPrior, rule: FallbackRule) -> Result<PosteriorModel> {
    let n_classes = oom.n_classes();
    if prior.weights().len() != n_classes {
        return Err(Error::DimensionMismatch {
            expected: n_classes,
            actual: prior.weights().len(),
        });
    }
    let n_theta = oom.grid.len();
    let slabs: Vec<(Vec<f64>, Vec<bool>)> = (0..oom.n_objects())
        .into_par_iter()
        .map(|object| {
            let mut post = vec![0.0; n_theta * n_classes];
            let mut fallback = vec![false; n_theta];
            let mut joint = vec![0.0; n_classes];
            let mut last_valid: Option<usize> = None;
            for t in 0..n_theta {
                for (c, j) in joint.iter_mut().enumerate() {
                    *j = oom.prob(object, c, t) * prior.weights()[c];
                }
                let evidence = order_free_sum(&joint);
                let column = &mut post[t * n_classes..(t + 1) * n_classes];
                if evidence > 0.0 {
                    for (dst, j) in column.iter_mut().zip(&joint) {
                        *dst = j / evidence;
                    }
                    last_valid = Some(t);
                } else {
                    fallback[t] = true;
                    match (rule, last_valid) {
                        (FallbackRule::LastValid, Some(prev)) => {
                            let (before, here) = post.split_at_mut(t * n_classes);
                            here[..n_classes].copy_from_slice(&before[prev * n_classes..(prev + 1) * n_classes]);
                        }
                        _ => column.copy_from_slice(prior.weights()),
                    }
                }
            }
            (post, fallback)
        })
        .collect();

    let mut posteriors = Vec::with_capacity(oom.n_objects() * n_theta * n_classes);
    let mut fallback = Vec::with_capacity(oom.n_objects() * n_theta);
    for (p, f) in slabs {
        posteriors.extend(p);
        fallback.extend(f);
    }
    Ok(PosteriorModel {
        vocabulary: oom.vocabulary.clone(),
        classes: oom.classes.clone(),
        grid: oom.grid.clone(),
        prior: prior.clone(),
        fallback_rule: rule,
        posteriors,
        fallback,
    })
}

/// Sum taken in ascending order so that it does not depend on class order.
fn order_free_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// Largest gap between consecutive class posteriors after sorting them in
/// descending order. Fallback cells score 0.
pub fn discriminability_at(post: &PosteriorModel, object: usize, theta: usize) -> Result<f64> {
    if post.n_classes() < 2 {
        return Err(Error::Argument("discriminability needs at least two classes".into()));
    }
    if post.is_fallback(object, theta) {
        return Ok(0.0);
    }
    Ok(max_ranked_gap(post.column(object, theta)))
}

pub(crate) fn max_ranked_gap(column: &[f64]) -> f64 {
    let mut ranked = column.to_vec();
    ranked.sort_by(|a, b| b.total_cmp(a));
    ranked.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

/// How per-threshold discriminability is collapsed into one object score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminantSelection {
    /// Aggregated discriminability of every vocabulary object.
    pub scores: Vec<f64>,
    /// Selected object indices, best first.
    pub selected: Vec<usize>,
}

impl DiscriminantSelection {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Maps a vocabulary index to its position in the selection.
    pub fn position_map(&self, n_objects: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; n_objects];
        for (pos, &o) in self.selected.iter().enumerate() {
            map[o] = Some(pos);
        }
        map
    }
}

/// Ranks objects by aggregated discriminability and keeps the top `count`.
/// Ties go to the lower object index.
pub fn select_objects(post: &PosteriorModel, count: usize, aggregation: Aggregation) -> Result<DiscriminantSelection> {
    let n_objects = post.n_objects();
    if count == 0 || count > n_objects {
        return Err(Error::Argument(format!("object count {count} outside 1..={n_objects}")));
    }
    let scores = (0..n_objects)
        .map(|o| {
            let profile = (0..post.grid.len())
                .map(|t| discriminability_at(post, o, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(match aggregation {
                Aggregation::Max => profile.iter().copied().fold(0.0, f64::max),
                Aggregation::Mean => profile.iter().sum::<f64>() / profile.len() as f64,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rank_objects(scores, count))
}

pub(crate) fn rank_objects(scores: Vec<f64>, count: usize) -> DiscriminantSelection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    DiscriminantSelection {
        scores,
        selected: order,
    }
}
