//! Synthetic multi-domain detection data with planted structure.
//!
//! Each image belongs to a scene class and a hidden topic. Objects fire with
//! a probability and a truncated-Gaussian score that depend on
//! (topic, class, object). The target domain is drawn from the same model
//! and then passed through a score transform and detection dropout, which
//! stands in for a change of camera, lighting or detector calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::descriptor::PyramidLayout;
use crate::error::{Error, Result};
use crate::ingest::{BBox, DatasetManifest, DetectionMode, Detections, HardDetection, ImageRecord, NameSet, SoftPatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub score_offset: f64,
    pub score_scale: f64,
    /// Probability of deleting each target-domain detection.
    pub dropout: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            score_offset: 0.0,
            score_scale: 1.0,
            dropout: 0.0,
        }
    }

    pub fn offset(score_offset: f64) -> Self {
        Self {
            score_offset,
            ..Self::identity()
        }
    }

    /// Shifted score, clamped back into `[0, 1]`.
    pub fn apply(&self, score: f64) -> f64 {
        (self.score_scale * score + self.score_offset).clamp(0.0, 1.0)
    }
}

/// Per-(topic, class, object) firing probability and score distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    n_classes: usize,
    n_objects: usize,
    presence: Vec<f64>,
    mean: Vec<f64>,
    spread: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectBehavior {
    pub presence: f64,
    pub mean: f64,
    pub spread: f64,
}

impl ScoreModel {
    /// Every object absent everywhere until set.
    pub fn new(n_topics: usize, n_classes: usize, n_objects: usize) -> Self {
        let len = n_topics * n_classes * n_objects;
        Self {
            n_classes,
            n_objects,
            presence: vec![0.0; len],
            mean: vec![0.5; len],
            spread: vec![0.1; len],
        }
    }

    fn idx(&self, topic: usize, class: usize, object: usize) -> usize {
        (topic * self.n_classes + class) * self.n_objects + object
    }

    pub fn set(&mut self, topic: usize, class: usize, object: usize, b: ObjectBehavior) {
        let i = self.idx(topic, class, object);
        self.presence[i] = b.presence;
        self.mean[i] = b.mean;
        self.spread[i] = b.spread;
    }

    pub fn get(&self, topic: usize, class: usize, object: usize) -> ObjectBehavior {
        let i = self.idx(topic, class, object);
        ObjectBehavior {
            presence: self.presence[i],
            mean: self.mean[i],
            spread: self.spread[i],
        }
    }
}

/// Low-confidence spurious detections scattered over all objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clutter {
    /// Per-object probability of one spurious detection per image.
    pub rate: f64,
    pub mean: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_objects: usize,
    pub n_topics: usize,
    pub images_per_class: usize,
    pub mode: DetectionMode,
    /// Patches per image in soft mode.
    pub patches_per_image: usize,
    pub score_model: ScoreModel,
    /// `[class][topic]` probability of an image of the class coming from the topic.
    pub topic_mix: Vec<Vec<f64>>,
    /// Typical box center of each object; detections scatter around it.
    pub placement: Vec<(f64, f64)>,
    pub clutter: Clutter,
    pub shift: DomainShift,
    pub seed: u64,
}

/// Planted structure, in vocabulary order: topic objects, contextual
/// objects, class signatures, then background objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedLayout {
    /// Objects firing in every image of one topic, whatever its class.
    pub per_topic: usize,
    /// Objects per (topic, class) pair. Inside their topic they mark their
    /// class; in other topics they fire for every class alike.
    pub per_context: usize,
    /// Objects marking one class in every topic.
    pub per_class: usize,
    pub topic_presence: f64,
    pub context_presence: f64,
    /// Presence of a contextual object outside its topic.
    pub context_generic: f64,
    pub class_presence: f64,
    /// Background presence rises linearly from the first class to the last,
    /// so classes differ in how cluttered they are.
    pub background_presence: (f64, f64),
    /// Presence of a planted object where it carries no signal.
    pub leak: f64,
    /// Share of a class's images drawn from its home topic `c mod D`; the
    /// rest is spread evenly over the other topics.
    pub home_topic_weight: f64,
    /// Range from which each object's mean detection score is drawn.
    pub calibration: (f64, f64),
    pub score_spread: f64,
}

impl Default for PlantedLayout {
    fn default() -> Self {
        Self {
            per_topic: 3,
            per_context: 1,
            per_class: 1,
            topic_presence: 0.9,
            context_presence: 0.9,
            context_generic: 0.5,
            class_presence: 0.3,
            background_presence: (0.1, 0.5),
            leak: 0.03,
            home_topic_weight: 0.6,
            calibration: (0.3, 0.5),
            score_spread: 0.2,
        }
    }
}

impl PlantedLayout {
    /// Number of vocabulary entries the planted structure occupies.
    pub fn planted_objects(&self, n_classes: usize, n_topics: usize) -> usize {
        n_topics * self.per_topic + n_topics * n_classes * self.per_context + n_classes * self.per_class
    }
}

impl SynthSpec {
    /// Planted-topic recipe with the default layout.
    pub fn planted(
        n_classes: usize,
        n_objects: usize,
        n_topics: usize,
        images_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::planted_with(
            n_classes,
            n_objects,
            n_topics,
            images_per_class,
            seed,
            PlantedLayout::default(),
        )
    }

    /// Each object has one detector calibration (score mean) shared by all
    /// classes and topics, so only presence carries scene information.
    pub fn planted_with(
        n_classes: usize,
        n_objects: usize,
        n_topics: usize,
        images_per_class: usize,
        seed: u64,
        layout: PlantedLayout,
    ) -> Result<Self> {
        if n_classes == 0 || n_objects == 0 || n_topics == 0 || images_per_class == 0 {
            return Err(Error::Argument(
                "synthetic dataset needs classes, objects, topics and images".into(),
            ));
        }
        let planted = layout.planted_objects(n_classes, n_topics);
        if planted > n_objects {
            return Err(Error::Argument(format!(
                "planted structure needs {planted} objects, vocabulary has {n_objects}"
            )));
        }
        let topic_block = n_topics * layout.per_topic;
        let context_block = topic_block + n_topics * n_classes * layout.per_context;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX, 0));
        let calibration: Vec<f64> = (0..n_objects)
            .map(|_| rng.random_range(layout.calibration.0..=layout.calibration.1))
            .collect();
        let (bg_lo, bg_hi) = layout.background_presence;
        let mut model = ScoreModel::new(n_topics, n_classes, n_objects);
        for t in 0..n_topics {
            for c in 0..n_classes {
                let background = if n_classes == 1 {
                    bg_lo
                } else {
                    bg_lo + (bg_hi - bg_lo) * c as f64 / (n_classes - 1) as f64
                };
                for (o, &mean) in calibration.iter().enumerate() {
                    let presence = if o < topic_block {
                        if o / layout.per_topic == t {
                            layout.topic_presence
                        } else {
                            layout.leak
                        }
                    } else if o < context_block {
                        let pair = (o - topic_block) / layout.per_context;
                        let (pt, pc) = (pair / n_classes, pair % n_classes);
                        match (pt == t, pc == c) {
                            (true, true) => layout.context_presence,
                            (true, false) => layout.leak,
                            (false, _) => layout.context_generic,
                        }
                    } else if o < planted {
                        if (o - context_block) / layout.per_class == c {
                            layout.class_presence
                        } else {
                            layout.leak
                        }
                    } else {
                        background
                    };
                    model.set(
                        t,
                        c,
                        o,
                        ObjectBehavior {
                            presence,
                            mean,
                            spread: layout.score_spread,
                        },
                    );
                }
            }
        }
        let topic_mix = (0..n_classes)
            .map(|c| {
                if n_topics == 1 {
                    return vec![1.0];
                }
                let rest = (1.0 - layout.home_topic_weight) / (n_topics - 1) as f64;
                (0..n_topics)
                    .map(|t| {
                        if t == c % n_topics {
                            layout.home_topic_weight
                        } else {
                            rest
                        }
                    })
                    .collect()
            })
            .collect();
        let placement = (0..n_objects)
            .map(|_| (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)))
            .collect();
        Ok(Self {
            n_classes,
            n_objects,
            n_topics,
            images_per_class,
            mode: DetectionMode::Hard,
            patches_per_image: 8,
            score_model: model,
            topic_mix,
            placement,
            clutter: Clutter {
                rate: 0.05,
                mean: 0.15,
                spread: 0.05,
            },
            shift: DomainShift::identity(),
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_objects == 0 || self.n_topics == 0 || self.images_per_class == 0 {
            return Err(Error::Argument("degenerate synthetic dataset".into()));
        }
        let probs_ok = self.score_model.presence.iter().all(|p| (0.0..=1.0).contains(p))
            && (0.0..=1.0).contains(&self.clutter.rate);
        let spreads_ok = self.score_model.spread.iter().all(|s| *s > 0.0) && self.clutter.spread > 0.0;
        let shift_ok = self.shift.score_scale > 0.0 && (0.0..1.0).contains(&self.shift.dropout);
        let mix_ok = self.topic_mix.len() == self.n_classes
            && self.topic_mix.iter().all(|row| {
                row.len() == self.n_topics && row.iter().all(|p| *p >= 0.0) && row.iter().sum::<f64>() > 0.0
            });
        let placement_ok = self.placement.len() == self.n_objects
            && self
                .placement
                .iter()
                .all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        if !(probs_ok && spreads_ok && shift_ok && mix_ok && placement_ok) {
            return Err(Error::Argument(
                "synthetic dataset has invalid probabilities or spreads".into(),
            ));
        }
        if self.mode == DetectionMode::Soft && self.patches_per_image == 0 {
            return Err(Error::Argument(
                "soft synthesis needs at least one patch per image".into(),
            ));
        }
        Ok(())
    }
}

/// Source and target manifests with the generator's hidden topic of every record.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub source: DatasetManifest,
    pub target: DatasetManifest,
    pub source_topics: Vec<usize>,
    pub target_topics: Vec<usize>,
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truncated(rng: &mut ChaCha8Rng, mean: f64, spread: f64) -> f64 {
    let normal = Normal::new(mean, spread).expect("spread is positive");
    normal.sample(rng).clamp(0.0, 1.0)
}

/// Box of random size whose center scatters around `home`.
fn random_box(rng: &mut ChaCha8Rng, home: (f64, f64)) -> BBox {
    let w: f64 = rng.random_range(0.1..0.3);
    let h: f64 = rng.random_range(0.1..0.3);
    let cx = truncated(rng, home.0, 0.15).clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = truncated(rng, home.1, 0.15).clamp(h / 2.0, 1.0 - h / 2.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("box lies inside the unit square")
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Raw per-object scores for one image: `(object, score)` firings.
fn draw_firings(spec: &SynthSpec, rng: &mut ChaCha8Rng, topic: usize, class: usize) -> Vec<(usize, f64)> {
    let mut firings = Vec::new();
    for o in 0..spec.n_objects {
        let b = spec.score_model.get(topic, class, o);
        if rng.random::<f64>() < b.presence {
            let count = if rng.random::<f64>() < 0.25 { 2 } else { 1 };
            for _ in 0..count {
                firings.push((o, truncated(rng, b.mean, b.spread)));
            }
        }
        if rng.random::<f64>() < spec.clutter.rate {
            firings.push((o, truncated(rng, spec.clutter.mean, spec.clutter.spread)));
        }
    }
    firings
}

fn draw_record(
    spec: &SynthSpec,
    domain: u64,
    index: usize,
    class: usize,
    shift: Option<&DomainShift>,
) -> (ImageRecord, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, domain, index as u64));
    let topic = pick(&mut rng, &spec.topic_mix[class]);
    let firings = draw_firings(spec, &mut rng, topic, class);
    let detections = match spec.mode {
        DetectionMode::Hard => {
            let mut dets: Vec<HardDetection> = firings
                .into_iter()
                .map(|(object, score)| HardDetection {
                    object,
                    score,
                    bbox: random_box(&mut rng, spec.placement[object]),
                })
                .collect();
            if let Some(shift) = shift {
                dets.retain(|_| rng.random::<f64>() >= shift.dropout);
                for d in &mut dets {
                    d.score = shift.apply(d.score);
                }
            }
            Detections::Hard(dets)
        }
        DetectionMode::Soft => {
            // Each firing lands in a random subset of patches; every other
            // patch entry is low background noise.
            let mut patches: Vec<SoftPatch> = (0..spec.patches_per_image)
                .map(|k| SoftPatch {
                    id: k as u64,
                    scores: (0..spec.n_objects).map(|_| truncated(&mut rng, 0.05, 0.03)).collect(),
                })
                .collect();
            for (object, score) in firings {
                for patch in &mut patches {
                    if rng.random::<f64>() < 0.5 {
                        patch.scores[object] = patch.scores[object].max(score);
                    }
                }
            }
            if let Some(shift) = shift {
                for patch in &mut patches {
                    for s in &mut patch.scores {
                        *s = shift.apply(*s);
                    }
                }
            }
            Detections::Soft(patches)
        }
    };
    let domain_tag = if domain == 0 { "source" } else { "target" };
    let record = ImageRecord {
        image_id: format!("{domain_tag}-{index:06}"),
        scene_class: Some(class),
        domain: Some(domain_tag.to_string()),
        detections,
    };
    (record, topic)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let vocabulary = NameSet::new((0..spec.n_objects).map(|o| format!("obj{o:03}")))?;
    let classes = NameSet::new((0..spec.n_classes).map(|c| format!("class{c:02}")))?;
    let domain = |id: u64, shift: Option<&DomainShift>, split: &str| -> Result<(DatasetManifest, Vec<usize>)> {
        let (records, topics): (Vec<_>, Vec<_>) = (0..spec.n_classes * spec.images_per_class)
            .map(|i| draw_record(spec, id, i, i / spec.images_per_class, shift))
            .unzip();
        let manifest = DatasetManifest::new(vocabulary.clone(), classes.clone(), spec.mode, split, records)?;
        Ok((manifest, topics))
    };
    let (source, source_topics) = domain(0, None, "train")?;
    let (target, target_topics) = domain(1, Some(&spec.shift), "target")?;
    Ok(SynthOutput {
        source,
        target,
        source_topics,
        target_topics,
    })
}

/// Un-quantized comparator: the maximum raw score of each object in each
/// pyramid region, regions in layout order and objects in vocabulary order.
/// Soft patches carry no location and count as whole-image boxes.
pub fn encode_rawscore_baseline(record: &ImageRecord, n_objects: usize, layout: &PyramidLayout) -> Vec<f64> {
    let mut out = vec![0.0; layout.region_count() * n_objects];
    let mut seen = vec![false; out.len()];
    let mut put = |region: usize, object: usize, score: f64| {
        let i = region * n_objects + object;
        if !seen[i] || score > out[i] {
            out[i] = score;
            seen[i] = true;
        }
    };
    match &record.detections {
        Detections::Hard(dets) => {
            for d in dets {
                for r in layout.regions_for(&d.bbox) {
                    put(r, d.object, d.score);
                }
            }
        }
        Detections::Soft(patches) => {
            let full = BBox::full();
            let regions: Vec<usize> = layout.regions_for(&full).collect();
            for p in patches {
                for (o, &s) in p.scores.iter().enumerate() {
                    for &r in &regions {
                        put(r, o, s);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dets: Vec<(usize, f64, f64)>) -> ImageRecord {
        ImageRecord {
            image_id: "r".into(),
            scene_class: None,
            domain: None,
            detections: Detections::Hard(
                dets.into_iter()
                    .map(|(object, score, x)| HardDetection {
                        object,
                        score,
                        bbox: BBox::new(x - 0.05, 0.1, x + 0.05, 0.2).unwrap(),
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn baseline_takes_max_per_region() {
        let layout = PyramidLayout::default();
        let v = encode_rawscore_baseline(&record(vec![(1, 0.4, 0.2), (1, 0.9, 0.3)]), 3, &layout);
        assert_eq!(v.len(), 24);
        assert_eq!(v[1], 0.9);
        assert_eq!(v[3 + 1], 0.9);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 3);

        let single = encode_rawscore_baseline(&record(vec![(2, 0.7, 0.8)]), 3, &layout);
        assert_eq!(single[2], 0.7);
        // Top-right cell of the 2x2 level.
        assert_eq!(single[(1 + 1) * 3 + 2], 0.7);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = SynthSpec::planted(3, 20, 2, 5, 17).unwrap();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.source_topics, b.source_topics);
        let other = generate(&SynthSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a.source, other.source);
    }

    #[test]
    fn offset_shifts_scores() {
        let mut spec = SynthSpec::planted(2, 16, 2, 4, 5).unwrap();
        spec.clutter.rate = 0.0;
        spec.shift = DomainShift::offset(0.3);
        let shifted = generate(&spec).unwrap();
        spec.shift = DomainShift::identity();
        let plain = generate(&spec).unwrap();
        for (s, p) in shifted.target.records.iter().zip(&plain.target.records) {
            for (a, b) in s.hard().unwrap().iter().zip(p.hard().unwrap()) {
                assert_eq!(a.score, (b.score + 0.3).min(1.0));
            }
        }
    }

    #[test]
    fn heavy_dropout_empties_target() {
        let mut spec = SynthSpec::planted(3, 20, 2, 10, 5).unwrap();
        spec.shift.dropout = 0.99;
        let out = generate(&spec).unwrap();
        let source: usize = out.source.records.iter().map(|r| r.hard().unwrap().len()).sum();
        let target: usize = out.target.records.iter().map(|r| r.hard().unwrap().len()).sum();
        assert!(target * 20 < source, "{target} vs {source}");
    }

    #[test]
    fn degenerate_settings_fail() {
        assert!(SynthSpec::planted(0, 10, 1, 1, 0).is_err());
        assert!(SynthSpec::planted(6, 10, 3, 1, 0).is_err());
        let mut spec = SynthSpec::planted(2, 16, 2, 4, 5).unwrap();
        spec.shift.dropout = 1.0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn soft_mode_produces_full_vectors() {
        let mut spec = SynthSpec::planted(2, 16, 2, 3, 5).unwrap();
        spec.mode = DetectionMode::Soft;
        spec.patches_per_image = 4;
        let out = generate(&spec).unwrap();
        for r in &out.source.records {
            let patches = r.soft().unwrap();
            assert_eq!(patches.len(), 4);
            assert!(patches.iter().all(|p| p.scores.len() == 16));
        }
    }
}
