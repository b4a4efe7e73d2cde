//! Detection manifests: vocabularies, per-image detection records and the
//! line-oriented text format they are stored in.
//!
//! ```text
//! #vocab chair table book
//! #classes cafe bookstore
//! #mode hard
//! #split train
//!
//! img a01 cafe domain=web
//! det chair 0.82 0.10 0.40 0.30 0.90
//! det table 0.55 0.20 0.50 0.80 1.00
//!
//! img a02 ?
//! ```
//!
//! Soft manifests replace `det` lines with `patch <id> <s_1> ... <s_|O|>`.
//! `#split` is optional and defaults to the file stem; a manifest whose split
//! is `train` must have at least one record for every class.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split tag that triggers the per-class coverage check at parse time.
pub const TRAIN_SPLIT: &str = "train";

/// Ordered set of unique identifiers with stable indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct NameSet {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl NameSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Format("name list is empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name == "?" || name.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid name `{name}`")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate name `{name}`")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

impl TryFrom<Vec<String>> for NameSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        NameSet::new(names)
    }
}

impl From<NameSet> for Vec<String> {
    fn from(set: NameSet) -> Self {
        set.names
    }
}

/// The object categories a detector or recognizer reports on.
pub type ObjectVocabulary = NameSet;
/// The scene classes being recognized.
pub type SceneClassSet = NameSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectionMode {
    Hard,
    Soft,
}

impl DetectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionMode::Hard => "hard",
            DetectionMode::Soft => "soft",
        }
    }
}

impl std::str::FromStr for DetectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(DetectionMode::Hard),
            "soft" => Ok(DetectionMode::Soft),
            other => Err(Error::Argument(format!("unknown detection mode `{other}`"))),
        }
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&x0)
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y0)
            && (0.0..=1.0).contains(&y1)
            && x0 < x1
            && y0 < y1;
        if !ok {
            return Err(Error::Format(format!(
                "box ({x0}, {y0}, {x1}, {y1}) is not a valid normalized box"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The whole image.
    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardDetection {
    pub object: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPatch {
    pub id: u64,
    /// One confidence per vocabulary entry.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Detections {
    Hard(Vec<HardDetection>),
    Soft(Vec<SoftPatch>),
}

impl Detections {
    pub fn mode(&self) -> DetectionMode {
        match self {
            Detections::Hard(_) => DetectionMode::Hard,
            Detections::Soft(_) => DetectionMode::Soft,
        }
    }

    pub fn empty(mode: DetectionMode) -> Self {
        match mode {
            DetectionMode::Hard => Detections::Hard(Vec::new()),
            DetectionMode::Soft => Detections::Soft(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub scene_class: Option<usize>,
    /// Carried through for evaluation only; the model never reads it.
    pub domain: Option<String>,
    pub detections: Detections,
}

impl ImageRecord {
    pub fn hard(&self) -> Result<&[HardDetection]> {
        match &self.detections {
            Detections::Hard(d) => Ok(d),
            Detections::Soft(_) => Err(Error::Variant(self.image_id.clone())),
        }
    }

    pub fn soft(&self) -> Result<&[SoftPatch]> {
        match &self.detections {
            Detections::Soft(p) => Ok(p),
            Detections::Hard(_) => Err(Error::Variant(self.image_id.clone())),
        }
    }

    /// Highest confidence reported for `object` anywhere in the image, i.e.
    /// the image-level score `f_o(x)`. `None` when the object never fires.
    pub fn max_score(&self, object: usize) -> Option<f64> {
        match &self.detections {
            Detections::Hard(dets) => dets
                .iter()
                .filter(|d| d.object == object)
                .map(|d| d.score)
                .reduce(f64::max),
            Detections::Soft(patches) => patches.iter().map(|p| p.scores[object]).reduce(f64::max),
        }
    }
}

/// Whether a hard-detection record contains `object` at least once with a
/// score at or above `theta`.
pub fn threshold_indicator(record: &ImageRecord, object: usize, theta: f64) -> Result<bool> {
    let dets = record.hard()?;
    Ok(dets.iter().any(|d| d.object == object && d.score >= theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vocabulary: ObjectVocabulary,
    pub classes: SceneClassSet,
    pub mode: DetectionMode,
    pub split: String,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    /// Builds a manifest and checks every record against the vocabularies.
    pub fn new(
        vocabulary: ObjectVocabulary,
        classes: SceneClassSet,
        mode: DetectionMode,
        split: impl Into<String>,
        records: Vec<ImageRecord>,
    ) -> Result<Self> {
        let manifest = Self {
            vocabulary,
            classes,
            mode,
            split: split.into(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        for r in &self.records {
            if let Some(c) = r.scene_class {
                if c >= self.classes.len() {
                    return Err(Error::Dimension {
                        record: r.image_id.clone(),
                        message: format!("class index {c} out of range"),
                    });
                }
            }
            if r.detections.mode() != self.mode {
                return Err(Error::Format(format!(
                    "record `{}` is {} in a {} manifest",
                    r.image_id,
                    r.detections.mode().as_str(),
                    self.mode.as_str()
                )));
            }
            match &r.detections {
                Detections::Hard(dets) => {
                    for d in dets {
                        if d.object >= self.vocabulary.len() || !d.score.is_finite() {
                            return Err(Error::Dimension {
                                record: r.image_id.clone(),
                                message: "detection object index or score invalid".into(),
                            });
                        }
                    }
                }
                Detections::Soft(patches) => {
                    for p in patches {
                        check_patch(&r.image_id, p, self.vocabulary.len())?;
                    }
                }
            }
        }
        if self.split == TRAIN_SPLIT {
            self.require_all_classes()?;
        }
        Ok(())
    }

    /// Number of labeled records per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for c in self.records.iter().filter_map(|r| r.scene_class) {
            counts[c] += 1;
        }
        counts
    }

    /// Fails with the first class that has no labeled record.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&n| n == 0) {
            Some(c) => Err(Error::Model(format!(
                "class `{}` has no training images",
                self.classes.name(c)
            ))),
            None => Ok(()),
        }
    }

    pub fn is_compatible_with(&self, other: &DatasetManifest) -> bool {
        self.vocabulary == other.vocabulary && self.classes == other.classes && self.mode == other.mode
    }
}

fn check_patch(record: &str, patch: &SoftPatch, objects: usize) -> Result<()> {
    if patch.scores.len() != objects {
        return Err(Error::Dimension {
            record: record.to_string(),
            message: format!(
                "patch {} has {} scores, vocabulary has {}",
                patch.id,
                patch.scores.len(),
                objects
            ),
        });
    }
    if patch.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Dimension {
            record: record.to_string(),
            message: format!("patch {} has a non-finite score", patch.id),
        });
    }
    Ok(())
}

/// Reads and validates a manifest file. Without a `#split` header the file
/// stem becomes the split tag.
pub fn parse_manifest(path: impl AsRef<Path>, mode: DetectionMode) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_manifest_str(&text, mode, &stem)
}

struct PendingRecord {
    image_id: String,
    scene_class: Option<usize>,
    domain: Option<String>,
    hard: Vec<HardDetection>,
    soft: Vec<SoftPatch>,
}

pub fn parse_manifest_str(text: &str, mode: DetectionMode, default_split: &str) -> Result<DatasetManifest> {
    let mut vocab: Option<ObjectVocabulary> = None;
    let mut classes: Option<SceneClassSet> = None;
    let mut declared_mode: Option<DetectionMode> = None;
    let mut split: Option<String> = None;
    let mut records = Vec::new();
    let mut current: Option<PendingRecord> = None;

    let finish = |rec: PendingRecord, records: &mut Vec<ImageRecord>| {
        let detections = match mode {
            DetectionMode::Hard => Detections::Hard(rec.hard),
            DetectionMode::Soft => Detections::Soft(rec.soft),
        };
        records.push(ImageRecord {
            image_id: rec.image_id,
            scene_class: rec.scene_class,
            domain: rec.domain,
            detections,
        });
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            if let Some(rec) = current.take() {
                finish(rec, &mut records);
            }
            continue;
        }
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or_default();
        let rest: Vec<&str> = tokens.collect();

        if let Some(header) = keyword.strip_prefix('#') {
            if current.is_some() || !records.is_empty() {
                return Err(Error::parse(line_no, "header after the first record"));
            }
            match header {
                "vocab" => set_once(&mut vocab, NameSet::new(rest.iter().copied()), line_no, "vocab")?,
                "classes" => set_once(&mut classes, NameSet::new(rest.iter().copied()), line_no, "classes")?,
                "mode" => {
                    let [m] = rest.as_slice() else {
                        return Err(Error::parse(line_no, "expected `#mode hard|soft`"));
                    };
                    let m: DetectionMode = m
                        .parse()
                        .map_err(|_| Error::parse(line_no, format!("unknown mode `{m}`")))?;
                    if m != mode {
                        return Err(Error::Format(format!(
                            "file declares {} detections but {} was requested",
                            m.as_str(),
                            mode.as_str()
                        )));
                    }
                    set_once(&mut declared_mode, Ok(m), line_no, "mode")?;
                }
                "split" => {
                    let [s] = rest.as_slice() else {
                        return Err(Error::parse(line_no, "expected `#split <tag>`"));
                    };
                    set_once(&mut split, Ok(s.to_string()), line_no, "split")?;
                }
                other => return Err(Error::parse(line_no, format!("unknown header `#{other}`"))),
            }
            continue;
        }

        let (Some(vocab), Some(classes)) = (&vocab, &classes) else {
            return Err(Error::parse(line_no, "record before #vocab and #classes headers"));
        };

        match keyword {
            "img" => {
                if let Some(rec) = current.take() {
                    finish(rec, &mut records);
                }
                if rest.len() < 2 || rest.len() > 3 {
                    return Err(Error::parse(line_no, "expected `img <id> <class|?> [domain=<tag>]`"));
                }
                let scene_class = match rest[1] {
                    "?" => None,
                    name => Some(classes.index_of(name).ok_or_else(|| Error::Vocabulary {
                        line: line_no,
                        kind: "class",
                        name: name.to_string(),
                    })?),
                };
                let domain = match rest.get(2) {
                    None => None,
                    Some(tok) => match tok.strip_prefix("domain=") {
                        Some(tag) if !tag.is_empty() => Some(tag.to_string()),
                        _ => return Err(Error::parse(line_no, format!("expected `domain=<tag>`, got `{tok}`"))),
                    },
                };
                current = Some(PendingRecord {
                    image_id: rest[0].to_string(),
                    scene_class,
                    domain,
                    hard: Vec::new(),
                    soft: Vec::new(),
                });
            }
            "det" => {
                let Some(rec) = current.as_mut() else {
                    return Err(Error::parse(line_no, "`det` outside of a record"));
                };
                if mode != DetectionMode::Hard {
                    return Err(Error::Format(format!(
                        "line {line_no}: hard detection in soft record `{}`",
                        rec.image_id
                    )));
                }
                if rest.len() != 6 {
                    return Err(Error::parse(
                        line_no,
                        "expected `det <object> <score> <x0> <y0> <x1> <y1>`",
                    ));
                }
                let object = vocab.index_of(rest[0]).ok_or_else(|| Error::Vocabulary {
                    line: line_no,
                    kind: "object",
                    name: rest[0].to_string(),
                })?;
                let nums = parse_floats(&rest[1..], line_no)?;
                let bbox =
                    BBox::new(nums[1], nums[2], nums[3], nums[4]).map_err(|e| Error::parse(line_no, e.to_string()))?;
                rec.hard.push(HardDetection {
                    object,
                    score: nums[0],
                    bbox,
                });
            }
            "patch" => {
                let Some(rec) = current.as_mut() else {
                    return Err(Error::parse(line_no, "`patch` outside of a record"));
                };
                if mode != DetectionMode::Soft {
                    return Err(Error::Format(format!(
                        "line {line_no}: soft patch in hard record `{}`",
                        rec.image_id
                    )));
                }
                let Some((id, scores)) = rest.split_first() else {
                    return Err(Error::parse(line_no, "expected `patch <id> <scores...>`"));
                };
                let id: u64 = id
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad patch id `{id}`")))?;
                let patch = SoftPatch {
                    id,
                    scores: parse_floats(scores, line_no)?,
                };
                check_patch(&rec.image_id, &patch, vocab.len())?;
                rec.soft.push(patch);
            }
            other => return Err(Error::parse(line_no, format!("unknown keyword `{other}`"))),
        }
    }
    if let Some(rec) = current.take() {
        finish(rec, &mut records);
    }

    let vocabulary = vocab.ok_or_else(|| Error::Format("missing #vocab header".into()))?;
    let classes = classes.ok_or_else(|| Error::Format("missing #classes header".into()))?;
    DatasetManifest::new(
        vocabulary,
        classes,
        mode,
        split.unwrap_or_else(|| default_split.to_string()),
        records,
    )
}

fn set_once<T>(slot: &mut Option<T>, value: Result<T>, line: usize, what: &str) -> Result<()> {
    if slot.is_some() {
        return Err(Error::parse(line, format!("duplicate #{what} header")));
    }
    *slot = Some(value.map_err(|e| Error::parse(line, e.to_string()))?);
    Ok(())
}

fn parse_floats(tokens: &[&str], line: usize) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("bad number `{t}`")))
        })
        .collect()
}

/// Renders a manifest in the text format accepted by [`parse_manifest_str`].
pub fn write_manifest(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#vocab {}", manifest.vocabulary.names().join(" "));
    let _ = writeln!(out, "#classes {}", manifest.classes.names().join(" "));
    let _ = writeln!(out, "#mode {}", manifest.mode.as_str());
    let _ = writeln!(out, "#split {}", manifest.split);
    for r in &manifest.records {
        out.push('\n');
        let class = r.scene_class.map_or("?", |c| manifest.classes.name(c));
        let _ = write!(out, "img {} {}", r.image_id, class);
        if let Some(d) = &r.domain {
            let _ = write!(out, " domain={d}");
        }
        out.push('\n');
        match &r.detections {
            Detections::Hard(dets) => {
                for d in dets {
                    let b = d.bbox;
                    let _ = writeln!(
                        out,
                        "det {} {} {} {} {} {}",
                        manifest.vocabulary.name(d.object),
                        d.score,
                        b.x0,
                        b.y0,
                        b.x1,
                        b.y1
                    );
                }
            }
            Detections::Soft(patches) => {
                for p in patches {
                    let _ = write!(out, "patch {}", p.id);
                    for s in &p.scores {
                        let _ = write!(out, " {s}");
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_manifest(manifest)).map_err(|e| Error::io(path, e))
}
