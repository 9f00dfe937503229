use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rcad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcad")).args(args).output().unwrap()
}

const TINY: &str = "\
# small enough to train in seconds
depth = 2
resolution = 16
hidden_width = 4
epochs_stage1 = 2
epochs_stage2 = 1
epochs_stage3 = 1
batch_size = 2
crd_width = 2
synth.train_count = 4
synth.test_count = 4
synth.period = 4
synth.min_anomaly_pixels = 2
";

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_arguments_exit_with_usage_status() {
    assert_eq!(rcad(&[]).status.code(), Some(2));
    assert_eq!(rcad(&["train", "--stop-after", "4"]).status.code(), Some(2));
    assert_eq!(rcad(&["eval"]).status.code(), Some(2));
    assert_eq!(rcad(&["train", "--preset", "huge"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.rcad");
    let out = rcad(&["eval", "--checkpoint", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "depth = 3\ndepth = 4\n").unwrap();
    assert_eq!(rcad(&["train", "--config", path(&cfg)]).status.code(), Some(1));
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out_dir = dir.path().join("run");
    let out = rcad(&["train", "--config", path(&cfg), "--out-dir", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.txt", "train.log", "checkpoint.rcad", "checkpoint_stage1.rcad", "checkpoint_stage3.rcad"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(out_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.starts_with("stage=")));

    let data = dir.path().join("data");
    assert!(rcad(&["synth", "--config", path(&cfg), "--out-dir", path(&data)]).status.success());
    let ckpt = out_dir.join("checkpoint.rcad");
    let maps = dir.path().join("maps");
    let out = rcad(&[
        "infer",
        "--checkpoint",
        path(&ckpt),
        "--images",
        path(&data.join("stripes/test/good")),
        "--out-dir",
        path(&maps),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scores = fs::read_to_string(maps.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 3);

    let report = dir.path().join("report.csv");
    let out = rcad(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("category,i_auroc,p_auroc,ssim,psnr\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn resume_reproduces_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(rcad(&["train", "--config", path(&cfg), "--out-dir", path(&a)]).status.success());
    assert!(rcad(&["train", "--config", path(&cfg), "--out-dir", path(&b), "--stop-after", "1", "--sequential"])
        .status
        .success());
    let partial = b.join("checkpoint.rcad");
    assert!(rcad(&["train", "--resume", path(&partial), "--out-dir", path(&b)]).status.success());
    assert_eq!(
        fs::read(a.join("checkpoint.rcad")).unwrap(),
        fs::read(b.join("checkpoint.rcad")).unwrap()
    );
}
