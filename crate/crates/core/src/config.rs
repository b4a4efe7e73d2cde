//! Pipeline configuration: defaults, a flat `key = value` file format and
//! per-key overrides.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::descriptor::{PyramidLayout, VladNormalization};
use crate::ensemble::{EnsembleConfig, SgdConfig};
use crate::error::{Error, Result};
use crate::ingest::DetectionMode;
use crate::oom::{Aggregation, FallbackRule, PriorKind, ThresholdGrid};
use crate::topics::{DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Dataset profile supplying the default number of discriminant objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    SnapStore,
    Mit67,
}

impl Profile {
    pub fn default_objects(self, mode: DetectionMode) -> usize {
        match (self, mode) {
            (Profile::SnapStore, DetectionMode::Hard) => 140,
            (Profile::SnapStore, DetectionMode::Soft) => 300,
            (Profile::Mit67, DetectionMode::Hard) => 200,
            (Profile::Mit67, DetectionMode::Soft) => 500,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Profile::SnapStore => "snapstore",
            Profile::Mit67 => "mit67",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snapstore" => Ok(Profile::SnapStore),
            "mit67" => Ok(Profile::Mit67),
            _ => Err(Error::Argument(format!("unknown profile `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: DetectionMode,
    pub profile: Profile,
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_step: f64,
    pub prior: PriorKind,
    pub fallback: FallbackRule,
    /// Explicit object count; the profile default applies when unset.
    pub objects: Option<usize>,
    pub aggregation: Aggregation,
    pub pyramid: PyramidLayout,
    pub pca_dim: usize,
    pub codebook_size: usize,
    pub vlad: VladNormalization,
    pub topics: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub lambdas: Vec<f64>,
    pub eta0s: Vec<f64>,
    pub epochs: usize,
    pub folds: usize,
    pub global_cv: bool,
    pub seed: u64,
    /// Object counts swept by the ablation.
    pub ablate_objects: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: DetectionMode::Hard,
            profile: Profile::SnapStore,
            theta_min: 0.0,
            theta_max: 1.0,
            theta_step: 0.05,
            prior: PriorKind::Uniform,
            fallback: FallbackRule::Prior,
            objects: None,
            aggregation: Aggregation::Max,
            pyramid: PyramidLayout::default(),
            pca_dim: 500,
            codebook_size: 100,
            vlad: VladNormalization::default(),
            topics: 5,
            kmeans_max_iter: DEFAULT_MAX_ITER,
            kmeans_tol: DEFAULT_TOL,
            lambdas: vec![1e-5, 1e-4, 1e-3],
            eta0s: vec![0.1, 1.0],
            epochs: 30,
            folds: 5,
            global_cv: false,
            seed: 0,
            ablate_objects: vec![10, 20, 50, 100, 140],
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Argument(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Argument(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn grid(&self) -> Result<ThresholdGrid> {
        ThresholdGrid::new(self.theta_min, self.theta_max, self.theta_step)
    }

    pub fn object_count(&self) -> usize {
        self.objects.unwrap_or_else(|| self.profile.default_objects(self.mode))
    }

    pub fn sgd_grid(&self) -> Vec<SgdConfig> {
        let mut grid = Vec::new();
        for &lambda in &self.lambdas {
            for &eta0 in &self.eta0s {
                grid.push(SgdConfig {
                    lambda,
                    eta0,
                    epochs: self.epochs,
                    seed: self.seed,
                });
            }
        }
        grid
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            grid: self.sgd_grid(),
            folds: self.folds,
            global_cv: self.global_cv,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "mode" => self.mode = value.parse()?,
            "profile" => self.profile = value.parse()?,
            "theta_min" => self.theta_min = parse_num(key, value)?,
            "theta_max" => self.theta_max = parse_num(key, value)?,
            "theta_step" => self.theta_step = parse_num(key, value)?,
            "prior" => {
                self.prior = match value {
                    "uniform" => PriorKind::Uniform,
                    "empirical" => PriorKind::Empirical,
                    _ => return Err(Error::Argument(format!("unknown prior `{value}`"))),
                }
            }
            "fallback" => {
                self.fallback = match value {
                    "prior" => FallbackRule::Prior,
                    "last-valid" | "last_valid" => FallbackRule::LastValid,
                    _ => return Err(Error::Argument(format!("unknown fallback rule `{value}`"))),
                }
            }
            "objects" => {
                self.objects = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "aggregation" => {
                self.aggregation = match value {
                    "max" => Aggregation::Max,
                    "mean" => Aggregation::Mean,
                    _ => return Err(Error::Argument(format!("unknown aggregation `{value}`"))),
                }
            }
            "pyramid" => self.pyramid = value.parse()?,
            "pca_dim" => self.pca_dim = parse_num(key, value)?,
            "codebook_size" => self.codebook_size = parse_num(key, value)?,
            "vlad_signed_sqrt" => self.vlad.signed_sqrt = parse_bool(key, value)?,
            "vlad_l2" => self.vlad.l2 = parse_bool(key, value)?,
            "topics" => self.topics = parse_num(key, value)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse_num(key, value)?,
            "kmeans_tol" => self.kmeans_tol = parse_num(key, value)?,
            "lambdas" => self.lambdas = parse_list(key, value)?,
            "eta0s" => self.eta0s = parse_list(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "global_cv" => self.global_cv = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "ablate_objects" => self.ablate_objects = parse_list(key, value)?,
            other => return Err(Error::Argument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies an override of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("override `{assignment}` is not key=value")))?;
        self.set(key, value)
    }

    /// Parses a config file on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        if self.object_count() == 0 {
            return bad("objects must be at least 1");
        }
        if self.topics == 0 {
            return bad("topics must be at least 1");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.pca_dim == 0 || self.codebook_size == 0 {
            return bad("pca_dim and codebook_size must be at least 1");
        }
        if self.lambdas.is_empty() || self.eta0s.is_empty() {
            return bad("SGD grid is empty");
        }
        for cfg in self.sgd_grid() {
            cfg.validate()?;
        }
        if self.kmeans_tol.is_nan() || self.kmeans_tol < 0.0 || self.kmeans_max_iter == 0 {
            return bad("invalid k-means stopping rule");
        }
        Ok(())
    }

    /// Serializes every key in the file format accepted by [`parse_str`](Self::parse_str).
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("mode", self.mode.as_str().into());
        line("profile", self.profile.as_str().into());
        line("theta_min", self.theta_min.to_string());
        line("theta_max", self.theta_max.to_string());
        line("theta_step", self.theta_step.to_string());
        line(
            "prior",
            match self.prior {
                PriorKind::Uniform => "uniform",
                PriorKind::Empirical => "empirical",
            }
            .into(),
        );
        line(
            "fallback",
            match self.fallback {
                FallbackRule::Prior => "prior",
                FallbackRule::LastValid => "last-valid",
            }
            .into(),
        );
        line("objects", self.objects.map_or("auto".into(), |r| r.to_string()));
        line(
            "aggregation",
            match self.aggregation {
                Aggregation::Max => "max",
                Aggregation::Mean => "mean",
            }
            .into(),
        );
        line("pyramid", self.pyramid.to_string());
        line("pca_dim", self.pca_dim.to_string());
        line("codebook_size", self.codebook_size.to_string());
        line("vlad_signed_sqrt", self.vlad.signed_sqrt.to_string());
        line("vlad_l2", self.vlad.l2.to_string());
        line("topics", self.topics.to_string());
        line("kmeans_max_iter", self.kmeans_max_iter.to_string());
        line("kmeans_tol", self.kmeans_tol.to_string());
        line("lambdas", join(&self.lambdas));
        line("eta0s", join(&self.eta0s));
        line("epochs", self.epochs.to_string());
        line("folds", self.folds.to_string());
        line("global_cv", self.global_cv.to_string());
        line("seed", self.seed.to_string());
        line("ablate_objects", join(&self.ablate_objects));
        s
    }
}
