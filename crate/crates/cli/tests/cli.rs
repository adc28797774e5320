use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn walkpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_walkpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = walkpose(args);
    assert!(
        out.status.success(),
        "walkpose {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_TRAIN: &str = r#"{ "epochs": 2, "hidden_width": 32, "blocks": 1, "batch_size": 64 }"#;

/// gen → train → run on the test subject's detections → eval.
fn end_to_end(root: &Path) -> (Vec<u8>, String) {
    let data = root.join("data");
    ok(&[
        "gen",
        "--subjects",
        "3",
        "--speeds",
        "0.5",
        "--duration",
        "6",
        "--seed",
        "5",
        "--out",
        p(&data),
    ]);

    let train_cfg = root.join("train.json");
    fs::write(&train_cfg, TINY_TRAIN).unwrap();
    let model = root.join("model.json");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&train_cfg),
        "--out",
        p(&model),
    ]);

    let pred = root.join("pred.seq");
    ok(&[
        "run",
        "--model",
        p(&model),
        "--rig",
        p(&data.join("calibration.json")),
        "--detections",
        p(&data.join("s02_v05.det.seq")),
        "--out",
        p(&pred),
    ]);

    let report = root.join("report.json");
    ok(&[
        "eval",
        "--pred",
        p(&pred),
        "--gt",
        p(&data.join("s02_v05.gt.seq")),
        "--json",
        p(&report),
    ]);
    (fs::read(&model).unwrap(), fs::read_to_string(&report).unwrap())
}

#[test]
fn gen_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen",
        "--subjects",
        "3",
        "--speeds",
        "0.5,1.0",
        "--duration",
        "4",
        "--out",
        p(&data),
    ]);
    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    let seqs = index["sequences"].as_array().unwrap();
    assert_eq!(seqs.len(), 6);
    for s in seqs {
        let name = s["name"].as_str().unwrap();
        assert_eq!(s["frames"].as_u64().unwrap(), 40);
        for suffix in ["gt", "det"] {
            let text = fs::read_to_string(data.join(format!("{name}.{suffix}.seq"))).unwrap();
            assert!(text.starts_with("#skeleton-seq"));
            assert_eq!(text.lines().count(), 41);
        }
    }
    assert!(data.join("calibration.json").exists());
    ok(&["calib-check", p(&data.join("calibration.json"))]);
}

#[test]
fn end_to_end_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (model_a, report_a) = end_to_end(a.path());
    let (model_b, report_b) = end_to_end(b.path());
    assert_eq!(model_a, model_b);
    assert_eq!(report_a, report_b);

    let report: serde_json::Value = serde_json::from_str(&report_a).unwrap();
    let mpjpe = report["mpjpe_mm"]["mean"].as_f64().unwrap();
    assert!(mpjpe.is_finite() && mpjpe > 0.0, "{report}");
}

#[test]
fn filter_smooths_a_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&[
        "gen",
        "--subjects",
        "3",
        "--speeds",
        "0.5",
        "--duration",
        "3",
        "--out",
        p(&data),
    ]);
    let input = data.join("s00_v05.gt.seq");
    let out = dir.path().join("smooth.seq");
    ok(&["filter", "--input", p(&input), "--output", p(&out), "--fc-min", "1.0"]);
    let raw = fs::read_to_string(&input).unwrap();
    let smooth = fs::read_to_string(&out).unwrap();
    assert_eq!(raw.lines().count(), smooth.lines().count());
    // The first sample passes through unchanged; later ones lag.
    assert_eq!(raw.lines().nth(1), smooth.lines().nth(1));
    assert_ne!(raw.lines().nth(5), smooth.lines().nth(5));

    let stdout = ok(&["filter", "--input", p(&input)]).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), raw.lines().count());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing: PathBuf = dir.path().join("nope.json");

    let out = walkpose(&["run", "--model", p(&missing)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"posture": 1}"#).unwrap();
    assert_eq!(walkpose(&["calib-check", p(&bad)]).status.code(), Some(2));
    assert_eq!(walkpose(&["calib-check", p(&missing)]).status.code(), Some(2));

    let rig = dir.path().join("rig.json");
    ok(&["calib-check", "--write-default", p(&rig)]);
    let text = String::from_utf8(ok(&["calib-check", p(&rig)]).stdout).unwrap();
    assert!(text.contains("valid"));

    let bad_train = dir.path().join("train.json");
    fs::write(&bad_train, r#"{"epochs": 0}"#).unwrap();
    let out = walkpose(&[
        "train",
        "--data",
        p(dir.path()),
        "--config",
        p(&bad_train),
        "--out",
        p(&missing),
    ]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(
        walkpose(&["gen", "--subjects", "2", "--out", p(dir.path())])
            .status
            .code(),
        Some(2)
    );
}
