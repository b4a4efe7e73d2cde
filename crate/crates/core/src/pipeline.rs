//! End-to-end training, prediction, evaluation and ablation.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, selection_hash, ArtifactKind, DescriptorMatrix, FORMAT_VERSION};
use crate::config::PipelineConfig;
use crate::descriptor::{
    encode_hard, encode_soft, fit_codebook, fit_pca, patch_matrices, PcaTransform, PyramidLayout, VladCodebook,
    VladNormalization,
};
use crate::ensemble::{train_ensemble, EnsembleConfig, Pooling, Prediction, TopicEnsemble};
use crate::error::{Error, Result, StageContext};
use crate::ingest::{DatasetManifest, DetectionMode, ImageRecord, NameSet};
use crate::metrics::{classification_report, ClassificationReport};
use crate::oom::{
    build_occurrence_model, build_posterior_model, select_objects, ClassPrior, DiscriminantSelection, OccurrenceModel,
    PosteriorModel, PriorKind,
};
use crate::topics::{fit_topics, KMeansModel};

/// Wall-clock duration and a short summary of one pipeline stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct StageLog {
    pub stages: Vec<StageReport>,
}

impl StageLog {
    fn run<T>(
        &mut self,
        stage: &'static str,
        f: impl FnOnce() -> Result<T>,
        detail: impl FnOnce(&T) -> String,
    ) -> Result<T> {
        let start = Instant::now();
        let value = f().stage(stage)?;
        self.stages.push(StageReport {
            stage,
            seconds: start.elapsed().as_secs_f64(),
            detail: detail(&value),
        });
        Ok(value)
    }
}

/// Frozen soft-path components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftEncoder {
    pub pca: PcaTransform,
    pub codebook: VladCodebook,
    pub normalization: VladNormalization,
}

/// Occurrence model, posteriors and the selected objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticModel {
    pub occurrence: OccurrenceModel,
    pub posterior: PosteriorModel,
    pub selection: DiscriminantSelection,
}

/// Every component needed to encode and classify a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u16,
    pub config: PipelineConfig,
    pub mode: DetectionMode,
    pub semantic: SemanticModel,
    pub pyramid: PyramidLayout,
    pub soft: Option<SoftEncoder>,
    pub ensemble: TopicEnsemble,
}

pub fn fit_semantic_model(train: &DatasetManifest, cfg: &PipelineConfig, log: &mut StageLog) -> Result<SemanticModel> {
    let grid = cfg.grid().stage("config")?;
    let occurrence = log.run(
        "build_occurrence_model",
        || build_occurrence_model(train, &grid),
        |m| {
            format!(
                "{} objects x {} classes x {} thresholds",
                m.n_objects(),
                m.n_classes(),
                grid.len()
            )
        },
    )?;
    let prior = match cfg.prior {
        PriorKind::Uniform => ClassPrior::uniform(occurrence.n_classes()),
        PriorKind::Empirical => ClassPrior::empirical(train).stage("build_posterior_model")?,
    };
    let posterior = log.run(
        "build_posterior_model",
        || build_posterior_model(&occurrence, &prior, cfg.fallback),
        |p| format!("{} fallback cells", p.fallback_count()),
    )?;
    let selection = log.run(
        "select_objects",
        || select_objects(&posterior, cfg.object_count(), cfg.aggregation),
        |s| format!("{} objects selected", s.len()),
    )?;
    Ok(SemanticModel {
        occurrence,
        posterior,
        selection,
    })
}

fn labeled(manifest: &DatasetManifest) -> Vec<&ImageRecord> {
    manifest.records.iter().filter(|r| r.scene_class.is_some()).collect()
}

/// Fits PCA on all training patch matrices and a codebook on their
/// projections. The output dimension and codebook size are capped by the
/// available data.
pub fn fit_soft_encoder(
    records: &[&ImageRecord],
    semantic: &SemanticModel,
    cfg: &PipelineConfig,
    log: &mut StageLog,
) -> Result<SoftEncoder> {
    let patches: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| patch_matrices(r, &semantic.posterior, &semantic.selection))
        .collect::<Result<Vec<_>>>()
        .stage("encode")?
        .into_iter()
        .flatten()
        .map(|m| m.values)
        .collect();
    if patches.is_empty() {
        return Err(Error::DegenerateTraining("no training patches".into())).stage("fit_pca");
    }
    let input_dim = patches[0].len();
    let out_dim = cfg.pca_dim.min(input_dim).min(patches.len());
    let pca = log.run(
        "fit_pca",
        || fit_pca(&patches, out_dim),
        |p| {
            format!(
                "{} patches, {} -> {} dims",
                patches.len(),
                p.input_dim(),
                p.output_dim()
            )
        },
    )?;
    let projected: Vec<Vec<f64>> = patches.par_iter().map(|p| pca.project(p)).collect::<Result<_>>()?;
    let k = cfg.codebook_size.min(projected.len());
    let codebook = log.run(
        "fit_codebook",
        || fit_codebook(&projected, k, cfg.seed),
        |c| format!("{} centers, sigma {:.4}", c.len(), c.sigma),
    )?;
    Ok(SoftEncoder {
        pca,
        codebook,
        normalization: cfg.vlad,
    })
}

/// Descriptor of one record under frozen components.
pub fn encode_record(
    record: &ImageRecord,
    semantic: &SemanticModel,
    pyramid: &PyramidLayout,
    soft: Option<&SoftEncoder>,
) -> Result<Vec<f64>> {
    match soft {
        None => Ok(encode_hard(record, &semantic.posterior, &semantic.selection, pyramid)?.0),
        Some(s) => Ok(encode_soft(
            record,
            &semantic.posterior,
            &semantic.selection,
            &s.pca,
            &s.codebook,
            s.normalization,
        )?
        .0),
    }
}

pub fn encode_all(
    records: &[&ImageRecord],
    semantic: &SemanticModel,
    pyramid: &PyramidLayout,
    soft: Option<&SoftEncoder>,
) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .map(|r| encode_record(r, semantic, pyramid, soft))
        .collect()
}

/// Topic model plus per-topic ensemble over precomputed descriptors.
pub fn fit_classifier(
    descriptors: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    topics: usize,
    cfg: &PipelineConfig,
    ensemble: &EnsembleConfig,
    log: &mut StageLog,
) -> Result<TopicEnsemble> {
    let model: KMeansModel = log.run(
        "fit_topics",
        || fit_topics(descriptors, topics, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_tol),
        |m| {
            format!(
                "{} topics, {} iterations, inertia {:.4}",
                m.n_clusters(),
                m.iterations_run,
                m.inertia
            )
        },
    )?;
    log.run(
        "train_ensemble",
        || train_ensemble(descriptors, labels, n_classes, &model, ensemble),
        |e| format!("topic sizes {:?}", e.meta.topic_sizes),
    )
}

/// Runs the whole training chain on the labeled records of `train`.
pub fn train_bundle(train: &DatasetManifest, cfg: &PipelineConfig, log: &mut StageLog) -> Result<ModelBundle> {
    cfg.validate().stage("config")?;
    if train.mode != cfg.mode {
        return Err(Error::Compatibility(format!(
            "manifest is {} but the config expects {}",
            train.mode.as_str(),
            cfg.mode.as_str()
        )));
    }
    let semantic = fit_semantic_model(train, cfg, log)?;
    let records = labeled(train);
    let soft = match cfg.mode {
        DetectionMode::Hard => None,
        DetectionMode::Soft => Some(fit_soft_encoder(&records, &semantic, cfg, log)?),
    };
    let descriptors = log.run(
        "encode",
        || encode_all(&records, &semantic, &cfg.pyramid, soft.as_ref()),
        |d| format!("{} descriptors of dimension {}", d.len(), d.first().map_or(0, Vec::len)),
    )?;
    let labels: Vec<usize> = records.iter().filter_map(|r| r.scene_class).collect();
    let ensemble = fit_classifier(
        &descriptors,
        &labels,
        train.classes.len(),
        cfg.topics,
        cfg,
        &cfg.ensemble(),
        log,
    )?;
    Ok(ModelBundle {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        mode: cfg.mode,
        semantic,
        pyramid: cfg.pyramid.clone(),
        soft,
        ensemble,
    })
}

impl ModelBundle {
    pub fn vocabulary(&self) -> &NameSet {
        &self.semantic.occurrence.vocabulary
    }

    pub fn classes(&self) -> &NameSet {
        &self.semantic.occurrence.classes
    }

    pub fn check_compatible(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.vocabulary != *self.vocabulary() {
            return Err(Error::Compatibility(
                "object vocabulary differs from the model's".into(),
            ));
        }
        if manifest.classes != *self.classes() {
            return Err(Error::Compatibility("scene classes differ from the model's".into()));
        }
        if manifest.mode != self.mode {
            return Err(Error::Compatibility(format!(
                "manifest is {} but the model is {}",
                manifest.mode.as_str(),
                self.mode.as_str()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, record: &ImageRecord) -> Result<Vec<f64>> {
        encode_record(record, &self.semantic, &self.pyramid, self.soft.as_ref())
    }

    pub fn encode_manifest(&self, manifest: &DatasetManifest) -> Result<DescriptorMatrix> {
        self.check_compatible(manifest)?;
        let records: Vec<&ImageRecord> = manifest.records.iter().collect();
        let rows = encode_all(&records, &self.semantic, &self.pyramid, self.soft.as_ref())?;
        Ok(DescriptorMatrix {
            mode: self.mode,
            layout: self.layout_tag(),
            selection_hash: selection_hash(self.vocabulary(), &self.semantic.selection),
            dim: self.ensemble.dim(),
            image_ids: manifest.records.iter().map(|r| r.image_id.clone()).collect(),
            labels: manifest.records.iter().map(|r| r.scene_class).collect(),
            rows,
        })
    }

    pub fn layout_tag(&self) -> String {
        match &self.soft {
            None => self.pyramid.to_string(),
            Some(s) => format!("vlad:{}x{}", s.codebook.len(), s.pca.output_dim()),
        }
    }

    pub fn predict_descriptors(&self, rows: &[Vec<f64>], pooling: Pooling) -> Result<Vec<Prediction>> {
        rows.par_iter()
            .map(|x| self.ensemble.predict_pooled(x, pooling))
            .collect()
    }

    pub fn predict_manifest(&self, manifest: &DatasetManifest, pooling: Pooling) -> Result<Vec<Prediction>> {
        let matrix = self.encode_manifest(manifest)?;
        self.predict_descriptors(&matrix.rows, pooling)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        artifact::to_bytes(ArtifactKind::Bundle, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle: Self = artifact::from_bytes(ArtifactKind::Bundle, bytes)?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        artifact::save(path, ArtifactKind::Bundle, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bundle: Self = artifact::load(path, ArtifactKind::Bundle)?;
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "bundle version {} unsupported",
                self.format_version
            )));
        }
        let r = self.semantic.selection.len();
        let c = self.classes().len();
        let expected = match &self.soft {
            None => crate::descriptor::hard_descriptor_len(r, c, &self.pyramid),
            Some(s) => {
                if s.pca.input_dim() != r * c || s.codebook.dim() != s.pca.output_dim() {
                    return Err(Error::Artifact("soft encoder dimensions are inconsistent".into()));
                }
                s.codebook.len() * s.pca.output_dim()
            }
        };
        if self.ensemble.dim() != expected || self.ensemble.n_classes() != c {
            return Err(Error::Artifact(
                "ensemble dimensions are inconsistent with the encoder".into(),
            ));
        }
        Ok(())
    }
}

/// Predictions for a manifest and, when any record is labeled, accuracy.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub image_ids: Vec<String>,
    pub truth: Vec<Option<usize>>,
    pub predictions: Vec<Prediction>,
    pub report: Option<ClassificationReport>,
}

pub fn evaluate(bundle: &ModelBundle, manifest: &DatasetManifest, pooling: Pooling) -> Result<Evaluation> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let predictions = bundle.predict_manifest(manifest, pooling)?;
    let truth: Vec<Option<usize>> = manifest.records.iter().map(|r| r.scene_class).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let report = truth
        .iter()
        .any(Option::is_some)
        .then(|| classification_report(&truth, &predicted, bundle.classes().len()));
    Ok(Evaluation {
        image_ids: manifest.records.iter().map(|r| r.image_id.clone()).collect(),
        truth,
        predictions,
        report,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.6}"))
}

impl Evaluation {
    /// `image_id,predicted_class,score_<class>...`
    pub fn predictions_csv(&self, classes: &NameSet) -> String {
        let mut s = String::from("image_id,predicted_class");
        for name in classes.names() {
            s.push_str(&format!(",score_{name}"));
        }
        s.push('\n');
        for (id, p) in self.image_ids.iter().zip(&self.predictions) {
            s.push_str(&format!("{id},{}", classes.name(p.class)));
            for v in &p.scores {
                s.push_str(&format!(",{v:.9}"));
            }
            s.push('\n');
        }
        s
    }

    /// Per-class accuracy rows followed by the class mean and the overall
    /// accuracy; `NA` where no labeled sample exists.
    pub fn metrics_csv(&self, classes: &NameSet) -> String {
        let mut s = String::from("class,samples,accuracy\n");
        match &self.report {
            Some(r) => {
                for (c, acc) in r.per_class.iter().enumerate() {
                    let n: usize = r.confusion[c].iter().sum();
                    s.push_str(&format!("{},{n},{}\n", classes.name(c), fmt_opt(*acc)));
                }
                let labeled: usize = r.confusion.iter().flatten().sum();
                s.push_str(&format!("class_mean,{labeled},{}\n", fmt_opt(r.class_mean)));
                s.push_str(&format!("overall,{labeled},{}\n", fmt_opt(r.overall)));
            }
            None => {
                s.push_str("class_mean,0,NA\noverall,0,NA\n");
            }
        }
        s
    }

    /// Rows are true classes, columns predicted classes.
    pub fn confusion_csv(&self, classes: &NameSet) -> Option<String> {
        let r = self.report.as_ref()?;
        let mut s = String::from("true\\predicted");
        for name in classes.names() {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (c, row) in r.confusion.iter().enumerate() {
            s.push_str(classes.name(c));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        Some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub objects: usize,
    pub topics: usize,
    pub pooling: Pooling,
    pub class_mean_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
}

/// Sweeps the object count, the topic count (1 and the configured value) and
/// the pooling rule, training on `train` and scoring on `test`.
pub fn ablate(
    train: &DatasetManifest,
    test: &DatasetManifest,
    cfg: &PipelineConfig,
    log: &mut StageLog,
) -> Result<Vec<AblationRow>> {
    if !train.is_compatible_with(test) {
        return Err(Error::Compatibility(
            "train and test manifests differ in vocabulary or classes".into(),
        ));
    }
    if cfg.ablate_objects.is_empty() {
        return Err(Error::Argument("ablation needs at least one object count".into()));
    }
    let mut topic_counts = vec![1];
    if cfg.topics != 1 {
        topic_counts.push(cfg.topics);
    }
    let mut rows = Vec::new();
    for &objects in &cfg.ablate_objects {
        let run_cfg = PipelineConfig {
            objects: Some(objects),
            ..cfg.clone()
        };
        let semantic = fit_semantic_model(train, &run_cfg, log)?;
        let records = labeled(train);
        let soft = match cfg.mode {
            DetectionMode::Hard => None,
            DetectionMode::Soft => Some(fit_soft_encoder(&records, &semantic, &run_cfg, log)?),
        };
        let train_x = encode_all(&records, &semantic, &cfg.pyramid, soft.as_ref()).stage("encode")?;
        let train_y: Vec<usize> = records.iter().filter_map(|r| r.scene_class).collect();
        let test_records: Vec<&ImageRecord> = test.records.iter().collect();
        let test_x = encode_all(&test_records, &semantic, &cfg.pyramid, soft.as_ref()).stage("encode")?;
        let truth: Vec<Option<usize>> = test.records.iter().map(|r| r.scene_class).collect();
        for &topics in &topic_counts {
            let ensemble = fit_classifier(
                &train_x,
                &train_y,
                train.classes.len(),
                topics,
                &run_cfg,
                &run_cfg.ensemble(),
                log,
            )?;
            for pooling in [Pooling::Average, Pooling::Max] {
                let predicted: Vec<usize> = test_x
                    .iter()
                    .map(|x| ensemble.predict_pooled(x, pooling).map(|p| p.class))
                    .collect::<Result<_>>()?;
                let report = classification_report(&truth, &predicted, train.classes.len());
                rows.push(AblationRow {
                    objects,
                    topics,
                    pooling,
                    class_mean_accuracy: report.class_mean,
                    overall_accuracy: report.overall,
                });
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("objects,topics,pooling,class_mean_accuracy,overall_accuracy\n");
    for r in rows {
        let pooling = match r.pooling {
            Pooling::Average => "average",
            Pooling::Max => "max",
        };
        s.push_str(&format!(
            "{},{},{pooling},{},{}\n",
            r.objects,
            r.topics,
            fmt_opt(r.class_mean_accuracy),
            fmt_opt(r.overall_accuracy)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            objects: Some(10),
            topics: 1,
            lambdas: vec![1e-4],
            eta0s: vec![0.1],
            epochs: 10,
            folds: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn trains_and_predicts_synthetic_hard() {
        let out = generate(&SynthSpec::planted(3, 20, 2, 20, 3).unwrap()).unwrap();
        let mut log = StageLog::default();
        let bundle = train_bundle(&out.source, &small_cfg(), &mut log).unwrap();
        assert!(log.stages.iter().any(|s| s.stage == "train_ensemble"));
        let eval = evaluate(&bundle, &out.source, Pooling::Average).unwrap();
        let acc = eval.report.unwrap().overall.unwrap();
        assert!(acc >= 1.0 / 3.0, "train accuracy {acc}");
        let back = ModelBundle::from_bytes(&bundle.to_bytes().unwrap()).unwrap();
        assert_eq!(back, bundle);
    }

    #[test]
    fn too_many_objects_fail_at_selection() {
        let out = generate(&SynthSpec::planted(3, 20, 2, 5, 3).unwrap()).unwrap();
        let mut cfg = small_cfg();
        cfg.objects = Some(21);
        let err = train_bundle(&out.source, &cfg, &mut StageLog::default()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Stage {
                    stage: "select_objects",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn too_many_topics_fail_at_clustering() {
        let out = generate(&SynthSpec::planted(2, 20, 2, 2, 3).unwrap()).unwrap();
        let mut cfg = small_cfg();
        cfg.topics = 5;
        let err = train_bundle(&out.source, &cfg, &mut StageLog::default()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Stage {
                    stage: "fit_topics",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn soft_pipeline_runs() {
        let mut spec = SynthSpec::planted(2, 16, 2, 6, 9).unwrap();
        spec.mode = DetectionMode::Soft;
        spec.patches_per_image = 3;
        let out = generate(&spec).unwrap();
        let mut cfg = small_cfg();
        cfg.mode = DetectionMode::Soft;
        cfg.objects = Some(4);
        cfg.pca_dim = 5;
        cfg.codebook_size = 3;
        let bundle = train_bundle(&out.source, &cfg, &mut StageLog::default()).unwrap();
        assert_eq!(bundle.ensemble.dim(), 15);
        let eval = evaluate(&bundle, &out.target, Pooling::Average).unwrap();
        assert_eq!(eval.predictions.len(), out.target.records.len());
    }
}
