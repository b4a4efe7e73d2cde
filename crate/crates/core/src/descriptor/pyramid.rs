use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::BBox;

/// One pyramid level: `rows` horizontal bands by `cols` vertical strips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub rows: usize,
    pub cols: usize,
}

impl Level {
    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidLayout {
    levels: Vec<Level>,
}

impl PyramidLayout {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|l| l.rows == 0 || l.cols == 0) {
            return Err(Error::Argument("pyramid levels must be non-empty grids".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn region_count(&self) -> usize {
        self.levels.iter().map(Level::regions).sum()
    }

    /// Global region indices (layout order) that contain the box center, one
    /// per level.
    pub fn regions_for<'a>(&'a self, bbox: &'a BBox) -> impl Iterator<Item = usize> + 'a {
        let mut base = 0;
        self.levels.iter().map(move |level| {
            let idx = base + assign_region(bbox, *level);
            base += level.regions();
            idx
        })
    }
}

impl Default for PyramidLayout {
    /// `1x1`, `2x2` and three horizontal bands.
    fn default() -> Self {
        Self {
            levels: vec![
                Level { rows: 1, cols: 1 },
                Level { rows: 2, cols: 2 },
                Level { rows: 3, cols: 1 },
            ],
        }
    }
}

impl std::str::FromStr for PyramidLayout {
    type Err = Error;

    /// Parses `ROWSxCOLS` levels separated by commas, e.g. `1x1,2x2,3x1`.
    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|part| {
                let (r, c) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| Error::Argument(format!("bad pyramid level `{part}`")))?;
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Argument(format!("bad pyramid level `{part}`")))
                };
                Ok(Level {
                    rows: parse(r)?,
                    cols: parse(c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PyramidLayout::new(levels)
    }
}

impl std::fmt::Display for PyramidLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.levels.iter().map(|l| format!("{}x{}", l.rows, l.cols)).collect();
        f.write_str(&parts.join(","))
    }
}

/// Row-major region of `level` holding the box center. Centers on an
/// interior boundary belong to the lower-index region.
pub fn assign_region(bbox: &BBox, level: Level) -> usize {
    let (cx, cy) = bbox.center();
    let cell = |v: f64, n: usize| ((v * n as f64).ceil() as usize).clamp(1, n) - 1;
    cell(cy, level.rows) * level.cols + cell(cx, level.cols)
}
