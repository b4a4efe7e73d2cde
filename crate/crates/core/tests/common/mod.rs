//! Independent reference implementations and random fixtures shared by the
//! integration tests. Oracles deliberately use the plainest formulation.

#![allow(dead_code)]

use oom_core::ingest::{
    BBox, DatasetManifest, DetectionMode, Detections, HardDetection, ImageRecord, NameSet, SoftPatch,
};
use oom_core::oom::{ClassPrior, OccurrenceModel, ThresholdGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn names(prefix: &str, n: usize) -> NameSet {
    NameSet::new((0..n).map(|i| format!("{prefix}{i}"))).unwrap()
}

/// Score that sometimes sits exactly on a grid point or outside the range.
fn random_score(rng: &mut ChaCha8Rng, grid: &ThresholdGrid) -> f64 {
    match rng.random_range(0..10) {
        0..=2 => grid.values()[rng.random_range(0..grid.len())],
        3 => rng.random_range(-0.2..0.0),
        4 => rng.random_range(1.0..1.2),
        _ => rng.random_range(0.0..1.0),
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
    BBox::new(
        x0,
        y0,
        x0 + rng.random_range(0.05..0.2),
        y0 + rng.random_range(0.05..0.2),
    )
    .unwrap()
}

/// Training manifest with at most 5 classes, 10 objects and 30 images.
pub fn random_manifest(rng: &mut ChaCha8Rng, grid: &ThresholdGrid, mode: DetectionMode) -> DatasetManifest {
    let n_classes = rng.random_range(1..=5);
    let n_objects = rng.random_range(1..=10);
    let n_images = rng.random_range(n_classes..=30);
    let records = (0..n_images)
        .map(|i| {
            let class = if i < n_classes {
                i
            } else {
                rng.random_range(0..n_classes)
            };
            let detections = match mode {
                DetectionMode::Hard => Detections::Hard(
                    (0..rng.random_range(0..=4))
                        .map(|_| HardDetection {
                            object: rng.random_range(0..n_objects),
                            score: random_score(rng, grid),
                            bbox: random_box(rng),
                        })
                        .collect(),
                ),
                DetectionMode::Soft => Detections::Soft(
                    (0..rng.random_range(1..=3))
                        .map(|p| SoftPatch {
                            id: p,
                            scores: (0..n_objects).map(|_| random_score(rng, grid)).collect(),
                        })
                        .collect(),
                ),
            };
            ImageRecord {
                image_id: format!("img{i}"),
                scene_class: Some(class),
                domain: None,
                detections,
            }
        })
        .collect();
    DatasetManifest::new(names("o", n_objects), names("c", n_classes), mode, "train", records).unwrap()
}

/// Fraction of class-`c` images containing object `o` at confidence ≥ θ,
/// counted image by image. Layout `[object][class][theta]`.
pub fn recount_occurrence(manifest: &DatasetManifest, grid: &ThresholdGrid) -> Vec<f64> {
    let n_c = manifest.classes.len();
    let mut out = Vec::new();
    for o in 0..manifest.vocabulary.len() {
        for c in 0..n_c {
            let members: Vec<&ImageRecord> = manifest.records.iter().filter(|r| r.scene_class == Some(c)).collect();
            for &theta in grid.values() {
                let hits = members
                    .iter()
                    .filter(|r| match &r.detections {
                        Detections::Hard(d) => d.iter().any(|d| d.object == o && d.score >= theta),
                        Detections::Soft(p) => p.iter().any(|p| p.scores[o] >= theta),
                    })
                    .count();
                out.push(hits as f64 / members.len() as f64);
            }
        }
    }
    out
}

/// Random occurrence model whose class curves are non-increasing in θ. Some
/// objects vanish for every class beyond a cutoff, producing zero-evidence
/// columns.
pub fn random_occurrence(
    rng: &mut ChaCha8Rng,
    n_objects: usize,
    n_classes: usize,
    grid: &ThresholdGrid,
) -> OccurrenceModel {
    let n_t = grid.len();
    let mut probs = Vec::with_capacity(n_objects * n_classes * n_t);
    for _ in 0..n_objects {
        let cutoff = if rng.random_bool(0.5) {
            rng.random_range(1..=n_t)
        } else {
            n_t
        };
        for _ in 0..n_classes {
            let mut p: f64 = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.0..=1.0)
            };
            for t in 0..n_t {
                if t >= cutoff {
                    p = 0.0;
                }
                probs.push(p);
                p *= rng.random_range(0.4..=1.0);
            }
        }
    }
    OccurrenceModel::from_parts(names("o", n_objects), names("c", n_classes), grid.clone(), probs).unwrap()
}

pub fn random_prior(rng: &mut ChaCha8Rng, n_classes: usize) -> ClassPrior {
    if rng.random_bool(0.3) {
        return ClassPrior::uniform(n_classes);
    }
    let raw: Vec<f64> = (0..n_classes).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ClassPrior::new(raw.iter().map(|w| w / total).collect()).unwrap()
}

/// Bayes inversion of one column, or `None` without evidence.
pub fn bayes_column(oom: &OccurrenceModel, prior: &ClassPrior, object: usize, theta: usize) -> Option<Vec<f64>> {
    let joint: Vec<f64> = (0..oom.n_classes())
        .map(|c| oom.prob(object, c, theta) * prior.weights()[c])
        .collect();
    let evidence: f64 = joint.iter().sum();
    (evidence > 0.0).then(|| joint.iter().map(|j| j / evidence).collect())
}

/// Largest gap between neighbours in the ascending sort of `column`.
pub fn gap_oracle(column: &[f64]) -> f64 {
    let mut v = column.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = 0.0;
    for i in 1..v.len() {
        if v[i] - v[i - 1] > best {
            best = v[i] - v[i - 1];
        }
    }
    best
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                let (lo, hi) = a.split_at_mut(q);
                for (apk, aqk) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (x, y) = (*apk, *aqk);
                    *apk = c * x - s * y;
                    *aqk = s * x + c * y;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    values.sort_by(|x, y| y.partial_cmp(x).unwrap());
    values
}

/// Sample covariance with divisor `n − 1`.
pub fn covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples.len();
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row {
            *v /= (n - 1) as f64;
        }
    }
    cov
}

/// Unnormalized soft-VLAD with unshifted exponentials, centre by centre.
pub fn naive_vlad(vectors: &[Vec<f64>], centers: &[Vec<f64>], sigma: f64) -> Vec<f64> {
    let dim = centers[0].len();
    let mut out = vec![0.0; centers.len() * dim];
    for v in vectors {
        let kernel: Vec<f64> = centers
            .iter()
            .map(|c| {
                let d2: f64 = v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let z: f64 = kernel.iter().sum();
        for j in 0..centers.len() {
            for i in 0..dim {
                out[j * dim + i] += kernel[j] / z * (v[i] - centers[j][i]);
            }
        }
    }
    out
}

pub fn hinge_objective(w: &[f64], b: f64, samples: &[(Vec<f64>, f64)], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|x| x * x).sum::<f64>();
    let loss: f64 = samples
        .iter()
        .map(|(x, y)| {
            let m = y * (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b);
            (1.0 - m).max(0.0)
        })
        .sum();
    reg + loss / samples.len() as f64
}

/// Full-batch subgradient descent with `1/√k` steps; returns the best
/// objective seen.
pub fn batch_subgradient_optimum(samples: &[(Vec<f64>, f64)], lambda: f64, iterations: usize) -> f64 {
    let dim = samples[0].0.len();
    let n = samples.len() as f64;
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let mut best = hinge_objective(&w, b, samples, lambda);
    for k in 1..=iterations {
        let mut gw: Vec<f64> = w.iter().map(|x| lambda * x).collect();
        let mut gb = 0.0;
        for (x, y) in samples {
            let m = y * (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b);
            if m < 1.0 {
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g -= y * xi / n;
                }
                gb -= y / n;
            }
        }
        let step = 0.5 / (k as f64).sqrt();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        b -= step * gb;
        best = best.min(hinge_objective(&w, b, samples, lambda));
    }
    best
}
