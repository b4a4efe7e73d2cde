use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean-centered projection onto the leading principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// Principal axes, one unit vector of length `input_dim` per component,
    /// ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
}

impl PcaTransform {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|axis| {
                axis.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(a, (v, m))| a * (v - m))
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (axis, &w) in self.components.iter().zip(z) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += w * a;
            }
        }
        out
    }
}

/// Principal axes from the eigendecomposition of the sample covariance
/// (divisor `n - 1`). Each axis is signed so that its first entry that is not
/// numerically zero is positive.
pub fn fit_pca(samples: &[Vec<f64>], out_dim: usize) -> Result<PcaTransform> {
    let n = samples.len();
    if out_dim == 0 {
        return Err(Error::Argument("PCA output dimension must be at least 1".into()));
    }
    if n < out_dim {
        return Err(Error::Argument(format!(
            "PCA to {out_dim} dimensions needs at least {out_dim} samples, got {n}"
        )));
    }
    let dim = samples[0].len();
    if out_dim > dim {
        return Err(Error::Argument(format!(
            "PCA output dimension {out_dim} exceeds input dimension {dim}"
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }

    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| samples[i][j] - mean[j]);
    let divisor = (n.max(2) - 1) as f64;
    let cov = (centered.transpose() * &centered) / divisor;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components = order[..out_dim]
        .iter()
        .map(|&j| {
            let mut axis: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            if let Some(first) = axis.iter().find(|v| v.abs() > 1e-12) {
                if *first < 0.0 {
                    axis.iter_mut().for_each(|v| *v = -*v);
                }
            }
            axis
        })
        .collect();
    let variances = order[..out_dim].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
    Ok(PcaTransform {
        mean,
        components,
        variances,
    })
}
