use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oom_core::artifact::{self, selection_hash, ArtifactKind};
use oom_core::ingest::{parse_manifest, save_manifest, DatasetManifest};
use oom_core::oom::{build_occurrence_model, build_posterior_model, select_objects};
use oom_core::pipeline::{ablate, ablation_csv, evaluate, train_bundle, StageLog};
use oom_core::synth::{generate, DomainShift, SynthSpec};
use oom_core::topics::assign_topic;
use oom_core::{
    ClassPrior, DetectionMode, DiscriminantSelection, Error, ModelBundle, OccurrenceModel, PipelineConfig, Pooling,
    PosteriorModel, PriorKind, Result,
};

#[derive(Parser)]
#[command(
    name = "oom",
    version,
    about = "Object-occurrence scene descriptors from detection score files"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target manifests with planted latent topics.
    Synth(SynthArgs),
    /// Tabulate occurrence probabilities and class posteriors over the threshold grid.
    BuildOom(BuildOomArgs),
    /// Print the posterior (or occurrence) curves of one object as CSV.
    Inspect(InspectArgs),
    /// Rank objects by discriminability and keep the top R.
    SelectObjects(SelectArgs),
    /// Encode a manifest with the frozen components of a bundle.
    Encode(EncodeArgs),
    /// Assign each record of a manifest to a latent topic of a bundle.
    Cluster(BundleInput),
    /// Fit the full pipeline on a training manifest and write a bundle.
    Train(TrainArgs),
    /// Predict scene classes for a manifest.
    Predict(PredictArgs),
    /// Predict and score a labeled manifest.
    Eval(EvalArgs),
    /// Sweep object counts, topic counts and pooling rules.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set topics=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for assignment in &self.overrides {
            cfg.apply_override(assignment)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Soft,
}

impl From<ModeArg> for DetectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hard => DetectionMode::Hard,
            ModeArg::Soft => DetectionMode::Soft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Average,
    Max,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Average => Pooling::Average,
            PoolingArg::Max => Pooling::Max,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving source.txt, target.txt and hidden_labels.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    objects: usize,
    #[arg(long, default_value_t = 3)]
    topics: usize,
    #[arg(long, default_value_t = 100)]
    images_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Hard)]
    mode: ModeArg,
    /// Patches per image in soft mode.
    #[arg(long, default_value_t = 8)]
    patches: usize,
    /// Target-domain score offset.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    offset: f64,
    /// Target-domain score scale.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Probability of deleting each target-domain detection.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
}

#[derive(Args)]
struct BuildOomArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Artifact written by `build-oom`.
    #[arg(long)]
    model: PathBuf,
    /// Object name.
    #[arg(long)]
    object: String,
    /// Print p(o|c;θ) instead of the posterior.
    #[arg(long)]
    occurrence: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Artifact written by `build-oom`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Selection artifact to write.
    #[arg(long)]
    out: PathBuf,
    /// Ranking CSV (object, score, rank, selected); stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Csv,
}

#[derive(Args)]
struct BundleInput {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    input: BundleInput,
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    format: FormatArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Pick SGD hyperparameters once on all training data instead of per topic.
    #[arg(long)]
    global_cv: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    input: BundleInput,
    #[arg(long, value_enum, default_value_t = PoolingArg::Average)]
    pooling: PoolingArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolingArg::Average)]
    pooling: PoolingArg,
    /// Per-class and class-mean accuracy; stdout when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    confusion: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::BuildOom(a) => build_oom(a),
        Command::Inspect(a) => inspect(a),
        Command::SelectObjects(a) => select(a),
        Command::Encode(a) => encode(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_stages(log: &StageLog) {
    for s in &log.stages {
        eprintln!("{:<24} {:>9.3}s  {}", s.stage, s.seconds, s.detail);
    }
}

fn load_for_bundle(bundle: &ModelBundle, path: &Path) -> Result<DatasetManifest> {
    let manifest = parse_manifest(path, bundle.mode)?;
    bundle.check_compatible(&manifest)?;
    Ok(manifest)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::planted(a.classes, a.objects, a.topics, a.images_per_class, a.seed)?;
    spec.mode = a.mode.into();
    spec.patches_per_image = a.patches;
    spec.shift = DomainShift {
        score_offset: a.offset,
        score_scale: a.scale,
        dropout: a.dropout,
    };
    let out = generate(&spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    save_manifest(&out.source, a.out_dir.join("source.txt"))?;
    save_manifest(&out.target, a.out_dir.join("target.txt"))?;
    let mut csv = String::from("image_id,split,class,topic\n");
    for (manifest, topics) in [(&out.source, &out.source_topics), (&out.target, &out.target_topics)] {
        for (r, t) in manifest.records.iter().zip(topics) {
            let class = r.scene_class.map_or("?", |c| manifest.classes.name(c));
            let _ = writeln!(csv, "{},{},{},{}", r.image_id, manifest.split, class, t);
        }
    }
    write_file(&a.out_dir.join("hidden_labels.csv"), csv)?;
    eprintln!(
        "wrote {} source and {} target records to {}",
        out.source.records.len(),
        out.target.records.len(),
        a.out_dir.display()
    );
    Ok(())
}

type OomArtifact = (OccurrenceModel, PosteriorModel);
type SelectionArtifact = (DiscriminantSelection, String);

fn build_oom(a: BuildOomArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let train = parse_manifest(&a.train, cfg.mode)?;
    let grid = cfg.grid()?;
    let occurrence = build_occurrence_model(&train, &grid)?;
    let prior = match cfg.prior {
        PriorKind::Uniform => ClassPrior::uniform(occurrence.n_classes()),
        PriorKind::Empirical => ClassPrior::empirical(&train)?,
    };
    let posterior = build_posterior_model(&occurrence, &prior, cfg.fallback)?;
    eprintln!(
        "{} objects x {} classes x {} thresholds, {} fallback cells",
        occurrence.n_objects(),
        occurrence.n_classes(),
        grid.len(),
        posterior.fallback_count()
    );
    artifact::save(&a.out, ArtifactKind::OccurrenceModel, &(occurrence, posterior))
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (occurrence, posterior): OomArtifact = artifact::load(&a.model, ArtifactKind::OccurrenceModel)?;
    let object = posterior
        .vocabulary
        .index_of(&a.object)
        .ok_or_else(|| Error::Argument(format!("unknown object `{}`", a.object)))?;
    let mut csv = String::from("theta,class,probability\n");
    for (t, theta) in posterior.grid.values().iter().enumerate() {
        for c in 0..posterior.n_classes() {
            let p = if a.occurrence {
                occurrence.prob(object, c, t)
            } else {
                posterior.posterior(object, c, t)
            };
            let _ = writeln!(csv, "{theta:.6},{},{p}", posterior.classes.name(c));
        }
    }
    emit(a.out.as_deref(), &csv)
}

fn select(a: SelectArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let (_, posterior): OomArtifact = artifact::load(&a.model, ArtifactKind::OccurrenceModel)?;
    let sel = select_objects(&posterior, cfg.object_count(), cfg.aggregation)?;
    let hash = selection_hash(&posterior.vocabulary, &sel);
    let mut rank = vec![None; posterior.n_objects()];
    for (i, &o) in sel.selected.iter().enumerate() {
        rank[o] = Some(i + 1);
    }
    let mut csv = String::from("object,score,rank,selected\n");
    for (o, score) in sel.scores.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{score},{},{}",
            posterior.vocabulary.name(o),
            rank[o].map_or(String::new(), |r| r.to_string()),
            rank[o].is_some()
        );
    }
    eprintln!(
        "selected {} of {} objects, hash {hash}",
        sel.len(),
        posterior.n_objects()
    );
    artifact::save(&a.out, ArtifactKind::Selection, &(sel, hash) as &SelectionArtifact)?;
    emit(a.csv.as_deref(), &csv)
}

fn encode(a: EncodeArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.input.bundle)?;
    let manifest = load_for_bundle(&bundle, &a.input.manifest)?;
    let matrix = bundle.encode_manifest(&manifest)?;
    eprintln!(
        "{} descriptors of dimension {} ({})",
        matrix.rows.len(),
        matrix.dim,
        matrix.layout
    );
    match (a.format, a.input.out.as_deref()) {
        (FormatArg::Csv, out) => emit(out, &matrix.to_csv(bundle.classes())),
        (FormatArg::Binary, Some(out)) => artifact::save(out, ArtifactKind::Descriptors, &matrix),
        (FormatArg::Binary, None) => Err(Error::Argument("binary output needs --out".into())),
    }
}

fn cluster(a: BundleInput) -> Result<()> {
    let bundle = ModelBundle::load(&a.bundle)?;
    let manifest = load_for_bundle(&bundle, &a.manifest)?;
    let matrix = bundle.encode_manifest(&manifest)?;
    let mut csv = String::from("image_id,topic,distance\n");
    for (id, row) in matrix.image_ids.iter().zip(&matrix.rows) {
        let t = assign_topic(&bundle.ensemble.topics, row)?;
        let _ = writeln!(csv, "{id},{},{}", t.topic, t.distance);
    }
    emit(a.out.as_deref(), &csv)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.global_cv |= a.global_cv;
    let train = parse_manifest(&a.train, cfg.mode)?;
    let mut log = StageLog::default();
    let result = train_bundle(&train, &cfg, &mut log);
    report_stages(&log);
    let bundle = result?;
    eprintln!(
        "trained on {} labeled records; topic sizes {:?}",
        bundle.ensemble.meta.topic_sizes.iter().sum::<usize>(),
        bundle.ensemble.meta.topic_sizes
    );
    bundle.save(&a.out)
}

fn predict(a: PredictArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.input.bundle)?;
    let manifest = load_for_bundle(&bundle, &a.input.manifest)?;
    let evaluation = evaluate(&bundle, &manifest, a.pooling.into())?;
    emit(a.input.out.as_deref(), &evaluation.predictions_csv(bundle.classes()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.bundle)?;
    let manifest = load_for_bundle(&bundle, &a.manifest)?;
    let evaluation = evaluate(&bundle, &manifest, a.pooling.into())?;
    let classes = bundle.classes();
    match evaluation.report.as_ref().and_then(|r| r.class_mean) {
        Some(acc) => eprintln!("class-mean accuracy {acc:.4} over {} records", manifest.records.len()),
        None => eprintln!("no labeled records: accuracy not applicable"),
    }
    emit(a.metrics.as_deref(), &evaluation.metrics_csv(classes))?;
    if let Some(path) = &a.confusion {
        match evaluation.confusion_csv(classes) {
            Some(csv) => write_file(path, csv)?,
            None => eprintln!("no labeled records: confusion matrix not written"),
        }
    }
    if let Some(path) = &a.predictions {
        write_file(path, evaluation.predictions_csv(classes))?;
    }
    Ok(())
}

fn run_ablation(a: AblateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let train = parse_manifest(&a.train, cfg.mode)?;
    let test = parse_manifest(&a.test, cfg.mode)?;
    let mut log = StageLog::default();
    let rows = ablate(&train, &test, &cfg, &mut log)?;
    report_stages(&log);
    emit(a.out.as_deref(), &ablation_csv(&rows))
}
