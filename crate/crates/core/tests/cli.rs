//! End-to-end tests of the `dfm` binary: exit codes, config precedence,
//! artifact layout, and byte-stable reruns. Everything runs on a tiny
//! generated dataset so the whole file stays fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_dfm");

fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}:\n{}",
        out.status.code(),
        stderr_of(out)
    );
}

/// Shared tiny world: a 20-image dataset and a 1-epoch checkpoint trained
/// on it. Built once; individual tests only read from it.
struct Fixture {
    _keep: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let keep = TempDir::new().unwrap();
        let data = keep.path().join("data");
        let run = keep.path().join("run");
        let gen = run_gen(&data, &["--seed", "9"]);
        assert_ok(&gen, "fixture gen-data");
        let train = run([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--seed",
            "9",
            "--epochs",
            "1",
            "--batch-size",
            "8",
        ]);
        assert_ok(&train, "fixture train");
        Fixture { _keep: keep, data, run }
    })
}

/// gen-data into `out` with the tiny 3-train/2-test per-class shape plus
/// any extra flags.
fn run_gen(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--train-per-class",
        "3",
        "--test-per-class",
        "2",
    ];
    args.extend_from_slice(extra);
    run(args)
}

fn first_sample_id(data: &Path) -> u64 {
    let index = std::fs::read_to_string(data.join("index.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(index.lines().next().unwrap()).unwrap();
    row["id"].as_u64().unwrap()
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = run(["gen-data", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("--out"), "{}", stderr_of(&out));
}

#[test]
fn malformed_list_flags_are_usage_errors() {
    let fix = fixture();
    let tmp = TempDir::new().unwrap();
    let eval = run([
        "eval",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--checkpoint",
        fix.run.join("checkpoint.bin").to_str().unwrap(),
        "--split",
        "validation",
    ]);
    assert_eq!(eval.status.code(), Some(2), "{}", stderr_of(&eval));

    let heat = run([
        "heatmap",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--checkpoint",
        fix.run.join("checkpoint.bin").to_str().unwrap(),
        "--ids",
        "3,abc",
    ]);
    assert_eq!(heat.status.code(), Some(2), "{}", stderr_of(&heat));

    let ablate = run([
        "ablate",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--train-seeds",
        "one",
    ]);
    assert_eq!(ablate.status.code(), Some(2), "{}", stderr_of(&ablate));
}

#[test]
fn invalid_dataset_shape_fails_before_writing() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    let out = run_gen(&dir, &["--clutter-lo", "0.9", "--clutter-hi", "0.2"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("clutter"), "{}", stderr_of(&out));
    assert!(!dir.join("index.jsonl").exists(), "failed run must not leave outputs");
}

#[test]
fn gen_data_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("d");
    assert_ok(&run_gen(&dir, &["--seed", "4"]), "first gen-data");
    let index_once = std::fs::read(dir.join("index.jsonl")).unwrap();
    let id = first_sample_id(&dir);
    let image = dir.join("img").join(format!("{id:06}.ppm"));
    let image_once = std::fs::read(&image).unwrap();

    assert_ok(&run_gen(&dir, &["--seed", "4"]), "second gen-data");
    assert_eq!(std::fs::read(dir.join("index.jsonl")).unwrap(), index_once);
    assert_eq!(std::fs::read(&image).unwrap(), image_once);
}

#[test]
fn flag_overrides_file_overrides_default() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "train_per_class = 3\ntest_per_class = 1 # comment\n").unwrap();

    // File layer beats the (600/100) defaults: 4 classes x (3 + 1) rows.
    let from_file = tmp.path().join("from_file");
    let out = run([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        from_file.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_ok(&out, "gen-data with config file");
    let rows = std::fs::read_to_string(from_file.join("index.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 16);

    // Flag layer beats the file: 4 classes x (2 + 1) rows.
    let from_flag = tmp.path().join("from_flag");
    let out = run([
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        from_flag.to_str().unwrap(),
        "--seed",
        "4",
        "--train-per-class",
        "2",
    ]);
    assert_ok(&out, "gen-data with config file + flag");
    let rows = std::fs::read_to_string(from_flag.join("index.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 12);
}

#[test]
fn train_writes_log_and_checkpoint() {
    let fix = fixture();
    let log = std::fs::read_to_string(fix.run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,loss,accuracy"));
    assert_eq!(lines.count(), 1, "one row per trained epoch");
    assert!(fix.run.join("checkpoint.bin").exists());
}

#[test]
fn eval_writes_csv_and_reruns_are_byte_identical() {
    let fix = fixture();
    let tmp = TempDir::new().unwrap();
    let eval_args = |out: &Path| {
        [
            "eval".to_string(),
            "--data".into(),
            fix.data.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--checkpoint".into(),
            fix.run.join("checkpoint.bin").to_str().unwrap().into(),
            "--split".into(),
            "test".into(),
        ]
    };
    let first = tmp.path().join("a");
    assert_ok(&run(eval_args(&first)), "first eval");
    let csv = std::fs::read_to_string(first.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("run,seed,split,top1_clas,top1_loc,gt_known_loc"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["checkpoint", "9", "test"]);
    for v in &row[3..] {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(lines.next().is_none());

    let second = tmp.path().join("b");
    assert_ok(&run(eval_args(&second)), "second eval");
    assert_eq!(
        std::fs::read(first.join("eval.csv")).unwrap(),
        std::fs::read(second.join("eval.csv")).unwrap()
    );
}

#[test]
fn eval_rejects_corrupt_checkpoint_without_partial_output() {
    let fix = fixture();
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("checkpoint.bin");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run([
        "eval",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
    assert!(!out_dir.join("eval.csv").exists(), "no partial CSV on failure");
}

#[test]
fn eval_per_sample_jsonl_has_one_row_per_image() {
    let fix = fixture();
    let tmp = TempDir::new().unwrap();
    let jsonl = tmp.path().join("per_sample.jsonl");
    let out = run([
        "eval",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--checkpoint",
        fix.run.join("checkpoint.bin").to_str().unwrap(),
        "--split",
        "test",
        "--per-sample",
        jsonl.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval with per-sample output");
    let text = std::fs::read_to_string(&jsonl).unwrap();
    // Tiny dataset: 4 classes x 2 test samples.
    assert_eq!(text.lines().count(), 8);
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["id", "true_class", "pred_class", "gt_box", "iou", "clas_correct", "loc_correct"] {
            assert!(row.get(key).is_some(), "missing {key} in {line}");
        }
    }
}

#[test]
fn heatmap_writes_three_files_per_id_and_rejects_unknown_ids() {
    let fix = fixture();
    let tmp = TempDir::new().unwrap();
    let id = first_sample_id(&fix.data);
    let out = run([
        "heatmap",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--checkpoint",
        fix.run.join("checkpoint.bin").to_str().unwrap(),
        "--ids",
        &id.to_string(),
    ]);
    assert_ok(&out, "heatmap");
    for name in [
        format!("cam_{id:06}.pgm"),
        format!("overlay_{id:06}.ppm"),
        format!("boxes_{id:06}.ppm"),
    ] {
        assert!(tmp.path().join(&name).exists(), "missing {name}");
    }

    let bad = run([
        "heatmap",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--checkpoint",
        fix.run.join("checkpoint.bin").to_str().unwrap(),
        "--ids",
        "424242",
    ]);
    assert_eq!(bad.status.code(), Some(1), "{}", stderr_of(&bad));
    assert!(stderr_of(&bad).contains("424242"), "{}", stderr_of(&bad));
}

#[test]
fn ablate_subset_reports_requested_variants_with_medians() {
    let fix = fixture();
    let tmp = TempDir::new().unwrap();
    let out = run([
        "ablate",
        "--data",
        fix.data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--variants",
        "fusion,focused",
        "--train-seeds",
        "7",
        "--epochs",
        "1",
        "--batch-size",
        "8",
    ]);
    assert_ok(&out, "ablate");
    let csv = std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,top1_clas,top1_loc,gt_known_loc");
    assert_eq!(lines.len(), 1 + 2 + 2, "2 result rows + 2 medians");
    // With a single seed each median row repeats that seed's metrics.
    for variant in ["fusion", "focused"] {
        let result = lines
            .iter()
            .find(|l| l.starts_with(&format!("{variant},7,")))
            .unwrap_or_else(|| panic!("no result row for {variant}"));
        let median = lines
            .iter()
            .find(|l| l.starts_with(&format!("{variant},median,")))
            .unwrap_or_else(|| panic!("no median row for {variant}"));
        let metrics = |l: &str| l.splitn(3, ',').nth(2).unwrap().to_string();
        assert_eq!(metrics(result), metrics(median));
    }
    // Variants outside the requested subset never appear.
    assert!(!csv.contains("channel,"), "unexpected variant rows:\n{csv}");
}
