//! Domain-robust scene recognition from object detections.
//!
//! Detection scores are quantized into scene-class posteriors through an
//! object occurrence model, encoded into semantic descriptors, clustered into
//! latent topics and classified by a per-topic linear ensemble.

pub mod artifact;
pub mod config;
pub mod descriptor;
pub mod ensemble;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod oom;
pub mod pipeline;
pub mod synth;
pub mod topics;

pub use config::{PipelineConfig, Profile};
pub use descriptor::{HardDescriptor, PcaTransform, PyramidLayout, SoftDescriptor, VladCodebook, VladNormalization};
pub use ensemble::{LinearClassifier, Pooling, Prediction, SgdConfig, TopicEnsemble};
pub use error::{Error, Result};
pub use ingest::{
    BBox, DatasetManifest, DetectionMode, Detections, HardDetection, ImageRecord, ObjectVocabulary, SceneClassSet,
    SoftPatch,
};
pub use oom::{
    Aggregation, ClassPrior, DiscriminantSelection, FallbackRule, OccurrenceModel, PosteriorModel, PriorKind,
    ThresholdGrid,
};
pub use pipeline::{ModelBundle, StageLog};
pub use synth::{DomainShift, SynthSpec};
pub use topics::{KMeansModel, TopicAssignment};
