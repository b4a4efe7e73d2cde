use std::path::Path;
use std::process::{Command, Output};

fn oom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oom"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = oom(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(dir: &Path, args: &[&str], needle: &str) {
    let out = oom(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "stderr `{err}` lacks `{needle}`");
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out-dir",
        "data",
        "--classes",
        "3",
        "--objects",
        "20",
        "--topics",
        "2",
        "--images-per-class",
        "12",
        "--seed",
        "5",
        "--offset",
        "0.1",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

const TRAIN: &[&str] = &[
    "train",
    "--train",
    "data/source.txt",
    "--set",
    "objects=10",
    "--set",
    "topics=2",
    "--set",
    "epochs=5",
];

fn run_pipeline(dir: &Path) -> Vec<Vec<u8>> {
    synth(dir, &[]);
    let mut train = TRAIN.to_vec();
    train.extend_from_slice(&["--out", "model.oom"]);
    ok(dir, &train);
    ok(
        dir,
        &[
            "eval",
            "--bundle",
            "model.oom",
            "--manifest",
            "data/target.txt",
            "--metrics",
            "metrics.csv",
            "--confusion",
            "confusion.csv",
            "--predictions",
            "predictions.csv",
        ],
    );
    ok(
        dir,
        &[
            "encode",
            "--bundle",
            "model.oom",
            "--manifest",
            "data/target.txt",
            "--out",
            "desc.bin",
        ],
    );
    ok(
        dir,
        &[
            "cluster",
            "--bundle",
            "model.oom",
            "--manifest",
            "data/source.txt",
            "--out",
            "topics.csv",
        ],
    );
    [
        "data/source.txt",
        "data/target.txt",
        "data/hidden_labels.csv",
        "model.oom",
        "metrics.csv",
        "confusion.csv",
        "predictions.csv",
        "desc.bin",
        "topics.csv",
    ]
    .iter()
    .map(|f| std::fs::read(dir.join(f)).unwrap())
    .collect()
}

#[test]
fn repeated_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run_pipeline(a.path()), run_pipeline(b.path()));

    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,samples,accuracy\n"));
    assert!(metrics.contains("class_mean,"));
    let desc = std::fs::read(a.path().join("desc.bin")).unwrap();
    assert_eq!(&desc[..8], b"OOMSCENE");
    let topics = std::fs::read_to_string(a.path().join("topics.csv")).unwrap();
    assert!(topics.starts_with("image_id,topic,distance\n"));
    assert_eq!(topics.lines().count(), 1 + 36);
}

#[test]
fn predictions_on_training_data_beat_the_majority_baseline() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let mut train = TRAIN.to_vec();
    train.extend_from_slice(&["--set", "topics=1", "--out", "model.oom"]);
    ok(dir.path(), &train);
    let metrics = ok(
        dir.path(),
        &["eval", "--bundle", "model.oom", "--manifest", "data/source.txt"],
    );
    let overall: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("overall,36,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(overall >= 1.0 / 3.0, "overall {overall}");

    let csv = ok(
        dir.path(),
        &[
            "predict",
            "--bundle",
            "model.oom",
            "--manifest",
            "data/target.txt",
            "--pooling",
            "max",
        ],
    );
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "image_id,predicted_class,score_class00,score_class01,score_class02"
    );
    assert_eq!(lines.count(), 36);
}

#[test]
fn unlabeled_manifests_get_predictions_without_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let mut train = TRAIN.to_vec();
    train.extend_from_slice(&["--out", "model.oom"]);
    ok(dir.path(), &train);
    let target = std::fs::read_to_string(dir.path().join("data/target.txt")).unwrap();
    let unlabeled: String = target
        .lines()
        .map(|l| match l.strip_prefix("img ") {
            Some(rest) => format!("img {} ?\n", rest.split(' ').next().unwrap()),
            None => format!("{l}\n"),
        })
        .collect();
    std::fs::write(dir.path().join("unlabeled.txt"), unlabeled).unwrap();
    let metrics = ok(
        dir.path(),
        &[
            "eval",
            "--bundle",
            "model.oom",
            "--manifest",
            "unlabeled.txt",
            "--predictions",
            "p.csv",
        ],
    );
    assert!(metrics.contains("class_mean,0,NA"), "{metrics}");
    let preds = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(preds.lines().count(), 37);
}

#[test]
fn stage_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let d = dir.path();
    fails_with(
        d,
        &[
            "train",
            "--train",
            "data/source.txt",
            "--set",
            "objects=21",
            "--out",
            "m",
        ],
        "select_objects",
    );
    fails_with(
        d,
        &[
            "train",
            "--train",
            "data/source.txt",
            "--set",
            "objects=5",
            "--set",
            "topics=40",
            "--out",
            "m",
        ],
        "fit_topics",
    );
    fails_with(
        d,
        &[
            "train",
            "--train",
            "data/source.txt",
            "--set",
            "nonsense=1",
            "--out",
            "m",
        ],
        "nonsense",
    );

    let mut train = TRAIN.to_vec();
    train.extend_from_slice(&["--out", "model.oom"]);
    ok(d, &train);
    std::fs::write(d.join("empty.txt"), "#vocab a\n#classes x\n#mode hard\n").unwrap();
    fails_with(
        d,
        &["eval", "--bundle", "model.oom", "--manifest", "empty.txt"],
        "empty manifest",
    );
    let other = std::fs::read_to_string(d.join("data/target.txt"))
        .unwrap()
        .replace("obj000", "zzz");
    std::fs::write(d.join("other.txt"), other).unwrap();
    fails_with(
        d,
        &["predict", "--bundle", "model.oom", "--manifest", "other.txt"],
        "incompatible",
    );
    fails_with(
        d,
        &["predict", "--bundle", "data/source.txt", "--manifest", "other.txt"],
        "magic",
    );
}

#[test]
fn occurrence_artifacts_can_be_inspected_and_ranked() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let d = dir.path();
    ok(d, &["build-oom", "--train", "data/source.txt", "--out", "oom.bin"]);
    let curve = ok(d, &["inspect", "--model", "oom.bin", "--object", "obj004"]);
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "theta,class,probability");
    assert_eq!(lines.count(), 21 * 3);
    for theta in curve.lines().skip(1).collect::<Vec<_>>().chunks(3) {
        let total: f64 = theta
            .iter()
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    fails_with(
        d,
        &["inspect", "--model", "oom.bin", "--object", "nope"],
        "unknown object",
    );

    let ranking = ok(
        d,
        &[
            "select-objects",
            "--model",
            "oom.bin",
            "--set",
            "objects=7",
            "--out",
            "sel.bin",
        ],
    );
    assert_eq!(ranking.lines().filter(|l| l.ends_with(",true")).count(), 7);
    assert_eq!(&std::fs::read(d.join("sel.bin")).unwrap()[..8], b"OOMSCENE");
}

#[test]
fn soft_pipeline_and_ablation_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--mode", "soft", "--patches", "4"]);
    let d = dir.path();
    ok(
        d,
        &[
            "train",
            "--train",
            "data/source.txt",
            "--set",
            "mode=soft",
            "--set",
            "objects=6",
            "--set",
            "pca_dim=8",
            "--set",
            "codebook_size=4",
            "--set",
            "topics=2",
            "--set",
            "epochs=5",
            "--global-cv",
            "--out",
            "soft.oom",
        ],
    );
    let csv = ok(
        d,
        &[
            "encode",
            "--bundle",
            "soft.oom",
            "--manifest",
            "data/target.txt",
            "--format",
            "csv",
        ],
    );
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 2 + 32);

    let table = ok(
        d,
        &[
            "ablate",
            "--train",
            "data/source.txt",
            "--test",
            "data/target.txt",
            "--set",
            "mode=soft",
            "--set",
            "pca_dim=8",
            "--set",
            "codebook_size=4",
            "--set",
            "topics=2",
            "--set",
            "epochs=3",
            "--set",
            "ablate_objects=4,6",
        ],
    );
    assert_eq!(
        table.lines().next().unwrap(),
        "objects,topics,pooling,class_mean_accuracy,overall_accuracy"
    );
    assert_eq!(table.lines().count(), 1 + 8);
}
