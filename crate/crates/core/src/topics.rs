//! Latent semantic topics via k-means over scene descriptors.
//!
//! Lloyd's algorithm from seeded k-means++ initialization. Clustering is
//! unsupervised: nothing here sees a class label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances from each training point to its nearest centroid.
    pub inertia: f64,
    pub seed: u64,
    pub iterations_run: usize,
}

impl KMeansModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }
}

/// Full result of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    /// Cluster of each training point under the final centroids.
    pub labels: Vec<usize>,
    /// Inertia after initialization and after every Lloyd update.
    pub inertia_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicAssignment {
    pub topic: usize,
    pub distance: f64,
}

/// Anything that can route a descriptor to one of a fixed set of topics.
pub trait TopicModel {
    fn n_topics(&self) -> usize;
    fn assign(&self, descriptor: &[f64]) -> Result<TopicAssignment>;
}

impl TopicModel for KMeansModel {
    fn n_topics(&self) -> usize {
        self.n_clusters()
    }

    fn assign(&self, descriptor: &[f64]) -> Result<TopicAssignment> {
        assign_topic(self, descriptor)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and squared distance; ties go to the lower index.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn assign_topic(model: &KMeansModel, descriptor: &[f64]) -> Result<TopicAssignment> {
    if descriptor.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: descriptor.len(),
        });
    }
    let (topic, d2) = nearest(&model.centroids, descriptor);
    Ok(TopicAssignment {
        topic,
        distance: d2.sqrt(),
    })
}

fn check_data(data: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Argument("number of clusters must be at least 1".into()));
    }
    if k > data.len() {
        return Err(Error::Argument(format!(
            "{k} clusters requested for {} samples",
            data.len()
        )));
    }
    let dim = data[0].len();
    if let Some(bad) = data.iter().find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    Ok(dim)
}

fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![data[first].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| squared_distance(x, &data[first])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            // Rounding can walk past the end; fall back to the last positive weight.
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|&w| w > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            // Fewer distinct points than clusters.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        for (dist, x) in d2.iter_mut().zip(data) {
            *dist = dist.min(squared_distance(x, &data[pick]));
        }
        centroids.push(data[pick].clone());
    }
    centroids
}

fn assign_all(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    data.par_iter().map(|x| nearest(centroids, x)).unzip()
}

/// k-means with full diagnostics. Stops after `max_iter` Lloyd updates or
/// once the relative inertia improvement drops to `tol` or below.
pub fn fit_kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansFit> {
    if data.is_empty() {
        return Err(Error::Argument("no samples to cluster".into()));
    }
    let dim = check_data(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(data, k, &mut rng);
    let (mut labels, mut d2) = assign_all(data, &centroids);
    let mut inertia: f64 = d2.iter().sum();
    let mut trace = vec![inertia];
    let mut iterations = 0;

    while iterations < max_iter && inertia > 0.0 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x) {
                *s += v;
            }
        }
        for (j, sum) in sums.into_iter().enumerate() {
            if counts[j] > 0 {
                centroids[j] = sum.into_iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its (updated) centroid.
        let mut taken = vec![false; data.len()];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..data.len())
                .filter(|&i| !taken[i])
                .map(|i| (i, squared_distance(&data[i], &centroids[labels[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                taken[i] = true;
                centroids[j] = data[i].clone();
            }
        }

        (labels, d2) = assign_all(data, &centroids);
        let previous = inertia;
        inertia = d2.iter().sum();
        trace.push(inertia);
        iterations += 1;
        if previous - inertia <= tol * previous {
            break;
        }
    }

    Ok(KMeansFit {
        model: KMeansModel {
            centroids,
            inertia,
            seed,
            iterations_run: iterations,
        },
        labels,
        inertia_trace: trace,
    })
}

pub fn fit_topics(descriptors: &[Vec<f64>], d: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansModel> {
    fit_kmeans(descriptors, d, seed, max_iter, tol).map(|fit| fit.model)
}
