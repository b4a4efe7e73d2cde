//! Fixtures shared by the benchmarks.

use oom_core::config::PipelineConfig;
use oom_core::pipeline::{encode_all, fit_semantic_model, SemanticModel, StageLog};
use oom_core::synth::{generate, SynthOutput, SynthSpec};
use oom_core::ImageRecord;

/// Hard-mode synthetic dataset at roughly the scale of one scene benchmark split.
pub fn dataset(classes: usize, objects: usize, images_per_class: usize) -> SynthOutput {
    let spec = SynthSpec::planted(classes, objects, 3, images_per_class, 7).expect("valid synthetic spec");
    generate(&spec).expect("generation succeeds")
}

pub fn semantic(data: &SynthOutput, selected: usize) -> (PipelineConfig, SemanticModel) {
    let cfg = PipelineConfig {
        objects: Some(selected),
        ..PipelineConfig::default()
    };
    let model = fit_semantic_model(&data.source, &cfg, &mut StageLog::default()).expect("semantic model fits");
    (cfg, model)
}

pub fn descriptors(data: &SynthOutput, cfg: &PipelineConfig, model: &SemanticModel) -> (Vec<Vec<f64>>, Vec<usize>) {
    let records: Vec<&ImageRecord> = data.source.records.iter().collect();
    let xs = encode_all(&records, model, &cfg.pyramid, None).expect("encoding succeeds");
    let ys = records.iter().map(|r| r.scene_class.expect("labeled")).collect();
    (xs, ys)
}
