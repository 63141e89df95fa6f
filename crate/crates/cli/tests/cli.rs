use std::path::Path;
use std::process::{Command, Output};

fn covernet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covernet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_data(dir: &Path) -> Output {
    covernet(&["gen-data", "--out", dir.to_str().unwrap(), "--scenes", "3", "--seed", "4", "--size", "64"])
}

fn train_small(data: &Path, ckpt: &Path, strategy: &str) -> Output {
    covernet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--strategy",
        strategy,
        "--epochs",
        "2",
        "--base-channels",
        "4",
        "--head-channels",
        "8",
    ])
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    assert_eq!(covernet(&["--help"]).status.code(), Some(0));
    assert_eq!(covernet(&["train", "--help"]).status.code(), Some(0));
    let missing = covernet(&["gen-data", "--scenes", "3"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("--out"));
    assert_eq!(covernet(&["gradcheck", "--bogus"]).status.code(), Some(1));
    assert_eq!(covernet(&["train", "--strategy", "sideways"]).status.code(), Some(1));
}

#[test]
fn gen_data_reports_counts_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen_data(dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("samples: 30"), "{text}");
    assert!(text.contains("distorted:clean = 9:1"), "{text}");
    assert!(dir.path().join("manifest.csv").is_file());
    assert!(dir.path().join("meta.json").is_file());
}

#[test]
fn train_eval_assess_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(gen_data(&data).status.code(), Some(0));
    let ckpt = dir.path().join("model.ckpt");
    let out = train_small(&data, &ckpt, "end2end");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("config: {"));
    assert!(stdout(&out).contains("checksum: "));
    let report = std::fs::read_to_string(dir.path().join("model.report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let preds = dir.path().join("preds.csv");
    let out = covernet(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--model",
        ckpt.to_str().unwrap(),
        "--report",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = stdout(&out);
    for key in ["lcc", "miou_all", "miou_gated"] {
        let row = table.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("{key} missing: {table}"));
        let value = row.split_whitespace().last().unwrap();
        assert!(value == "degenerate" || value.split('.').nth(1).is_some_and(|d| d.len() == 4), "{row}");
    }
    assert!(std::fs::read_to_string(&preds).unwrap().starts_with("id,clarity_score,predicted_score"));

    // 70x50 is not divisible by 16 and gets centre-cropped.
    let img = dir.path().join("odd.png");
    image::RgbImage::from_pixel(70, 50, image::Rgb([90, 140, 200])).save(&img).unwrap();
    let overlay = dir.path().join("overlay.png");
    let out = covernet(&[
        "assess",
        "--model",
        ckpt.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--overlay",
        overlay.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(!stderr(&out).is_empty());
    let json: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(json.as_object().unwrap().len(), 7);
    assert_eq!(image::open(&overlay).unwrap().to_rgb8().dimensions(), (64, 48));
}

#[test]
fn clarity_only_report_leaves_segmentation_columns_empty() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(gen_data(&data).status.code(), Some(0));
    let ckpt = dir.path().join("clarity.ckpt");
    let out = train_small(&data, &ckpt, "clarity-only");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("clarity.report.csv")).unwrap();
    for row in report.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert!(f[3].is_empty() && f[5].is_empty() && f[6].is_empty(), "{row}");
        assert!(!f[4].is_empty(), "{row}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = covernet(&["assess", "--model", missing.to_str().unwrap(), "--image", "x.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not found"));
    let out = covernet(&["gradcheck", "--tol", "1e-12"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let out = covernet(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("worst"));
}
