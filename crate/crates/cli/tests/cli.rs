use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cadunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadunet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    let o = cadunet(&[
        "synth", "--out", p(dir), "--count", "6", "--height", "32", "--width", "32", "--val-fraction", "0.34",
        "--seed", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = cadunet(&["metrics", "--frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&cadunet(&["--help"])), 0);
}

#[test]
fn identical_masks_score_100() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mask = dir.path().join("synth0001_infection.png");
    let o = cadunet(&["metrics", "--pred", p(&mask), "--gt", p(&mask)]);
    assert_eq!(code(&o), 0);
    let row = stdout(&o).lines().find(|l| l.starts_with("infection")).unwrap().to_string();
    let values: Vec<&str> = row.split_whitespace().skip(1).collect();
    assert_eq!(values.len(), 5);
    assert!(values.iter().all(|v| v.trim_end_matches('*') == "100.00"), "{row}");
}

#[test]
fn compare_reproduces_the_separated_five_by_five_case() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, "slice,f1\ns1,1\ns2,2\ns3,3\ns4,4\ns5,5\nall,3\n").unwrap();
    fs::write(&b, "slice,f1\ns1,6\ns2,7\ns3,8\ns4,9\ns5,10\n").unwrap();
    let o = cadunet(&["compare", "--a", p(&a), "--b", p(&b), "--metric", "f1"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("p = 0.00794 (2/252)"), "{}", stdout(&o));
    let missing = cadunet(&["compare", "--a", p(&a), "--b", p(&b), "--metric", "iou"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn gradcheck_table_and_exit_codes() {
    let o = cadunet(&["gradcheck", "--all"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for name in ["conv2d", "squash", "conv_capsule_r3", "hybrid_loss", "micro_model"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}\n{out}");
    }
    assert_eq!(code(&cadunet(&["gradcheck", "--op", "no_such_op"])), 1);
    assert_eq!(code(&cadunet(&["gradcheck"])), 1);
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("train.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 4);

    let train = |out: &Path| {
        cadunet(&[
            "train", "--train", p(&data.join("train.json")), "--val", p(&data.join("val.json")), "--out", p(out),
            "--epochs", "2", "--batch-size", "2", "--base-channels", "4", "--seed", "9", "--undersample",
        ])
    };
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&run_a)), 0);
    assert_eq!(code(&train(&run_b)), 0);
    let record = fs::read_to_string(run_a.join("run_record.csv")).unwrap();
    assert!(record.starts_with("step,epoch,lr,loss_total,loss_inf,loss_lung,loss_edge"));
    assert_eq!(record.lines().count(), 1 + 4);
    assert_eq!(record, fs::read_to_string(run_b.join("run_record.csv")).unwrap());
    for name in ["best", "final"] {
        assert!(run_a.join(name).join("manifest.json").exists());
    }

    let eval_out = dir.path().join("eval");
    let checkpoint = run_a.join("final");
    let o = cadunet(&["eval", "--checkpoint", p(&checkpoint), "--data", p(&data.join("val.json")), "--out", p(&eval_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("±"));
    let metrics = fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    // two slices plus the pooled row
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert_eq!(fs::read_dir(eval_out.join("overlays")).unwrap().count(), 2);

    let mismatch = cadunet(&[
        "eval", "--checkpoint", p(&checkpoint), "--data", p(&data.join("val.json")), "--out", p(&eval_out),
        "--classes", "2",
    ]);
    assert_eq!(code(&mismatch), 1);
}

#[test]
fn severity_audit_counts_every_slice() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let csv = dir.path().join("grades.csv");
    let o = cadunet(&["severity", "--data", p(&dir.path().join("train.json")), "--out", p(&csv)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("graded 4 of 4 slices"));
    let total: usize = stdout(&o)
        .lines()
        .filter(|l| !l.starts_with("graded"))
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 4);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, "{ not json").unwrap();
    let manifest = dir.path().join("missing.json");
    let o = cadunet(&["train", "--train", p(&manifest), "--out", p(dir.path()), "--config", p(&config)]);
    assert_eq!(code(&o), 1);
    let o = cadunet(&["train", "--train", p(&manifest), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = cadunet(&["train", "--train", p(&manifest), "--out", p(dir.path()), "--epochs", "0"]);
    assert_eq!(code(&o), 1);
}
