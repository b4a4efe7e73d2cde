//! Soft-VLAD descriptor for per-patch recognizer scores.
//!
//! Every patch becomes an `R × |C|` matrix of class posteriors, flattened and
//! PCA-reduced. The image descriptor aggregates the reduced patch vectors as
//! soft-assignment-weighted residuals to a k-means codebook.

use serde::{Deserialize, Serialize};

use super::pca::PcaTransform;
use crate::error::{Error, Result};
use crate::ingest::ImageRecord;
use crate::oom::{DiscriminantSelection, PosteriorModel};
use crate::topics::{fit_kmeans, squared_distance, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Row `i` holds the class posteriors of selected object `i` at the patch's
/// score for that object.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPosteriorMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PatchPosteriorMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VladCodebook {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl VladCodebook {
    pub fn new(centers: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if centers.is_empty() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Argument(
                "codebook needs at least one center and sigma > 0".into(),
            ));
        }
        let dim = centers[0].len();
        if centers
            .iter()
            .any(|c| c.len() != dim || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Argument(
                "codebook centers must be finite and equally sized".into(),
            ));
        }
        Ok(Self { centers, sigma })
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Post-aggregation normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VladNormalization {
    pub signed_sqrt: bool,
    pub l2: bool,
}

impl Default for VladNormalization {
    fn default() -> Self {
        Self {
            signed_sqrt: true,
            l2: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftDescriptor(pub Vec<f64>);

impl SoftDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn patch_matrices(
    record: &ImageRecord,
    post: &PosteriorModel,
    sel: &DiscriminantSelection,
) -> Result<Vec<PatchPosteriorMatrix>> {
    let patches = record.soft()?;
    let cols = post.n_classes();
    patches
        .iter()
        .map(|patch| {
            if patch.scores.len() != post.n_objects() {
                return Err(Error::Dimension {
                    record: record.image_id.clone(),
                    message: format!("patch {} does not match the model vocabulary", patch.id),
                });
            }
            let mut values = Vec::with_capacity(sel.len() * cols);
            for &o in &sel.selected {
                values.extend_from_slice(post.posterior_at_score(o, patch.scores[o]));
            }
            Ok(PatchPosteriorMatrix {
                rows: sel.len(),
                cols,
                values,
            })
        })
        .collect()
}

/// k-means codebook over PCA-reduced patch vectors. `sigma` is the mean
/// distance from each sample to its center, or 1 when every sample sits on
/// a center.
pub fn fit_codebook(projected: &[Vec<f64>], k: usize, seed: u64) -> Result<VladCodebook> {
    if projected.is_empty() {
        return Err(Error::Argument("no samples for the codebook".into()));
    }
    let fit = fit_kmeans(projected, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mean_dist = projected
        .iter()
        .zip(&fit.labels)
        .map(|(x, &l)| squared_distance(x, &fit.model.centroids[l]).sqrt())
        .sum::<f64>()
        / projected.len() as f64;
    let sigma = if mean_dist > 0.0 { mean_dist } else { 1.0 };
    VladCodebook::new(fit.model.centroids, sigma)
}

/// Gaussian soft-assignment weights over the codebook, summing to 1.
pub fn soft_assign(cb: &VladCodebook, v: &[f64]) -> Vec<f64> {
    let scale = 2.0 * cb.sigma * cb.sigma;
    let logits: Vec<f64> = cb.centers.iter().map(|c| -squared_distance(v, c) / scale).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Unnormalized soft-VLAD: block `j` is `Σ_k w_j(v_k) (v_k − c_j)`.
pub fn vlad_accumulate(vectors: &[Vec<f64>], cb: &VladCodebook) -> Vec<f64> {
    let dim = cb.dim();
    let mut out = vec![0.0; cb.len() * dim];
    for v in vectors {
        let weights = soft_assign(cb, v);
        for (j, (center, w)) in cb.centers.iter().zip(weights).enumerate() {
            let block = &mut out[j * dim..(j + 1) * dim];
            for ((o, x), c) in block.iter_mut().zip(v).zip(center) {
                *o += w * (x - c);
            }
        }
    }
    out
}

/// Signed square root followed by 2-norm scaling, as enabled. An all-zero
/// vector is returned unchanged.
pub fn normalize_vlad(mut v: Vec<f64>, norm: VladNormalization) -> Vec<f64> {
    if norm.signed_sqrt {
        v.iter_mut().for_each(|x| *x = x.signum() * x.abs().sqrt());
    }
    if norm.l2 {
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 0.0 {
            v.iter_mut().for_each(|x| *x /= len);
        }
    }
    v
}

/// Flattened, PCA-reduced patch vectors of a soft record.
pub fn projected_patches(
    record: &ImageRecord,
    post: &PosteriorModel,
    sel: &DiscriminantSelection,
    pca: &PcaTransform,
) -> Result<Vec<Vec<f64>>> {
    patch_matrices(record, post, sel)?
        .iter()
        .map(|m| pca.project(&m.values))
        .collect()
}

pub fn encode_soft(
    record: &ImageRecord,
    post: &PosteriorModel,
    sel: &DiscriminantSelection,
    pca: &PcaTransform,
    cb: &VladCodebook,
    norm: VladNormalization,
) -> Result<SoftDescriptor> {
    if pca.output_dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: pca.output_dim(),
            actual: cb.dim(),
        });
    }
    let mut vectors = projected_patches(record, post, sel, pca)?;
    if vectors.is_empty() {
        return Err(Error::Dimension {
            record: record.image_id.clone(),
            message: "empty bag".into(),
        });
    }
    // Canonical order keeps the floating-point sum independent of patch order.
    vectors.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(SoftDescriptor(normalize_vlad(vlad_accumulate(&vectors, cb), norm)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        let cb = VladCodebook::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 5.0]], 0.7).unwrap();
        let w = soft_assign(&cb, &[0.4, 0.3]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        // Far-away points must not produce NaNs.
        let w = soft_assign(&cb, &[1e6, -1e6]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_center_residuals() {
        let cb = VladCodebook::new(vec![vec![1.0, 2.0]], 1.0).unwrap();
        let v = vlad_accumulate(&[vec![1.0, 2.0]], &cb);
        assert_eq!(v, vec![0.0, 0.0]);
        assert_eq!(normalize_vlad(v, VladNormalization::default()), vec![0.0, 0.0]);

        let origin = VladCodebook::new(vec![vec![0.0, 0.0]], 1.0).unwrap();
        let raw = vlad_accumulate(&[vec![3.0, 4.0]], &origin);
        assert_eq!(raw, vec![3.0, 4.0]);
        let l2_only = VladNormalization {
            signed_sqrt: false,
            l2: true,
        };
        assert_eq!(normalize_vlad(raw, l2_only), vec![0.6, 0.8]);
    }

    #[test]
    fn codebook_edge_cases() {
        let data = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]];
        let one = fit_codebook(&data, 1, 3).unwrap();
        assert_eq!(one.centers, vec![vec![1.0, 1.0]]);
        assert!((one.sigma - 2f64.sqrt()).abs() < 1e-12);
        let all = fit_codebook(&data, 4, 3).unwrap();
        assert_eq!(all.sigma, 1.0);
        assert!(fit_codebook(&data, 5, 3).is_err());
    }
}
