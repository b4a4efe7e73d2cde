//! Pyramid-stacked posterior descriptor for hard detections.
//!
//! Each selected object's row in a region is the average of the posterior
//! columns looked up at that object's detection scores inside the region.
//! Undetected objects leave an all-zero row.

use serde::{Deserialize, Serialize};

use super::pyramid::PyramidLayout;
use crate::error::{Error, Result};
use crate::ingest::{HardDetection, ImageRecord};
use crate::oom::{DiscriminantSelection, PosteriorModel};

/// `R × |C|` class posteriors for the selected objects, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardDescriptor(pub Vec<f64>);

impl HardDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn hard_descriptor_len(selected: usize, classes: usize, layout: &PyramidLayout) -> usize {
    selected * classes * layout.region_count()
}

/// Accumulates per-(region, selected object) histograms of grid indices and
/// averages the matching posterior columns. Working from the histogram makes
/// the result independent of detection order and of score changes that do
/// not move a detection to a different grid point.
fn encode_regions<F>(
    detections: &[HardDetection],
    post: &PosteriorModel,
    sel: &DiscriminantSelection,
    regions: usize,
    region_of: F,
) -> Vec<f64>
where
    F: Fn(&HardDetection) -> Vec<usize>,
{
    let n_sel = sel.len();
    let n_classes = post.n_classes();
    let n_theta = post.grid.len();
    let positions = sel.position_map(post.n_objects());
    let mut hist = vec![0u32; regions * n_sel * n_theta];
    for det in detections {
        let Some(pos) = positions.get(det.object).copied().flatten() else {
            continue;
        };
        let t = post.grid.nearest_index(det.score);
        for region in region_of(det) {
            hist[(region * n_sel + pos) * n_theta + t] += 1;
        }
    }

    let mut out = vec![0.0; regions * n_sel * n_classes];
    for (cell, counts) in hist.chunks_exact(n_theta).enumerate() {
        let n: u32 = counts.iter().sum();
        if n == 0 {
            continue;
        }
        let object = sel.selected[cell % n_sel];
        let row = &mut out[cell * n_classes..(cell + 1) * n_classes];
        for (t, &k) in counts.iter().enumerate().filter(|(_, &k)| k > 0) {
            for (dst, p) in row.iter_mut().zip(post.column(object, t)) {
                *dst += k as f64 * p;
            }
        }
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    out
}

fn check_vocab(post: &PosteriorModel, sel: &DiscriminantSelection) -> Result<()> {
    if sel.scores.len() != post.n_objects() || sel.selected.iter().any(|&o| o >= post.n_objects()) {
        return Err(Error::Compatibility(
            "object selection does not match the posterior model vocabulary".into(),
        ));
    }
    Ok(())
}

/// Whole-image posterior matrix over the selected objects.
pub fn posterior_matrix(
    record: &ImageRecord,
    post: &PosteriorModel,
    sel: &DiscriminantSelection,
) -> Result<PosteriorMatrix> {
    check_vocab(post, sel)?;
    let values = encode_regions(record.hard()?, post, sel, 1, |_| vec![0]);
    Ok(PosteriorMatrix {
        rows: sel.len(),
        cols: post.n_classes(),
        values,
    })
}

/// Region matrices stacked in layout order, objects in selection order and
/// classes in class order.
pub fn encode_hard(
    record: &ImageRecord,
    post: &PosteriorModel,
    sel: &DiscriminantSelection,
    layout: &PyramidLayout,
) -> Result<HardDescriptor> {
    check_vocab(post, sel)?;
    let values = encode_regions(record.hard()?, post, sel, layout.region_count(), |d| {
        layout.regions_for(&d.bbox).collect()
    });
    Ok(HardDescriptor(values))
}
