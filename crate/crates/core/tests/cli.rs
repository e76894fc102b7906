use std::path::Path;
use std::process::Command;

use vivi_core::cli::{FINAL_CHECKPOINT, METRICS_CSV, RESOLVED_CONFIG};
use vivi_core::eval::read_report;

fn vivi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vivi"))
}

const TINY: &[&str] = &[
    "--override",
    "data.videos=40",
    "--override",
    "data.size=16",
    "--override",
    "train.model.input_size=16",
    "--override",
    "train.iterations=6",
    "--override",
    "train.warmup_iterations=1",
    "--override",
    "train.lr_schedule=\"x0.1@5\"",
    "--override",
    "train.videos=4",
    "--override",
    "train.shots=2",
    "--override",
    "train.frames=4",
    "--override",
    "train.augment.exemplar_frames=4",
    "--override",
    "train.nk_product=8",
    "--override",
    "train.model.channels=[4, 8]",
    "--override",
    "train.model.embed_dim=16",
    "--override",
    "train.model.predictor.shots=2",
    "--override",
    "train.model.predictor.recurrent_hidden=8",
    "--override",
    "eval.heldout_videos=20",
    "--override",
    "eval.examples_per_task=60",
    "--override",
    "eval.test_examples=100",
    "--override",
    "eval.short_epochs=2",
    "--override",
    "eval.long_epochs=4",
];

fn run(args: &[&str], out: &Path) -> std::process::Output {
    vivi().args(args).arg("--out").arg(out).output().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn usage_errors_exit_2() {
    let out = vivi().arg("no-such-verb").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = vivi().args(["train", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(vivi().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn module_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--override", "data.no_such_key=3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = run(&["eval", "--checkpoint", "/nonexistent.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = a.path().join("c.toml");
    std::fs::write(&cfg, "[data]\nvideos = 30\nsize = 16\n").unwrap();
    let args = ["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "7"];
    assert!(run(&args, &b.path().join("1")).status.success());
    assert!(run(&args, &b.path().join("2")).status.success());
    let (one, two) = (dir_bytes(&b.path().join("1/shards")), dir_bytes(&b.path().join("2/shards")));
    assert!(one.len() >= 2);
    assert_eq!(one, two);
    let resolved = std::fs::read_to_string(b.path().join("1").join(RESOLVED_CONFIG)).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("videos = 30"));
}

#[test]
fn gradcheck_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--tolerance", "1e-4"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().next().unwrap().contains("max rel err"));
    assert!(text.contains("triplet"));
    assert!(text.lines().skip(1).all(|l| l.ends_with("ok")));
}

#[test]
fn detect_shots_reports_f1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["detect-shots", "--override", "data.videos=20", "--override", "data.size=16"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("f1"));
    let lines = std::fs::read_to_string(dir.path().join("boundaries.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);
}

#[test]
fn train_eval_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--seed", "3", "--override", "lambda=0"];
    args.extend_from_slice(TINY);
    let out = run(&args, &run_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join(FINAL_CHECKPOINT).exists());
    let metrics = std::fs::read_to_string(run_dir.join(METRICS_CSV)).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6);

    let mut quiet = args.clone();
    quiet.extend(["--workers", "2", "--override", "train.record_wallclock=false"]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&quiet, &a).status.success());
    assert!(run(&quiet, &b).status.success());
    assert_eq!(std::fs::read(a.join(METRICS_CSV)).unwrap(), std::fs::read(b.join(METRICS_CSV)).unwrap());

    let mut eval_args = vec!["eval", "--seed", "3", "--method", "tiny"];
    eval_args.extend_from_slice(TINY);
    let ck = run_dir.join(FINAL_CHECKPOINT);
    eval_args.extend(["--checkpoint", ck.to_str().unwrap()]);
    let out = run(&eval_args, &run_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_report(&run_dir).unwrap();
    assert_eq!(report.len(), 1);
    assert_eq!(report[0].method, "tiny");
    assert_eq!(report[0].tasks.len(), 3);
    assert!(report[0].robustness.is_some());

    let merged = dir.path().join("merged");
    let out = vivi()
        .args(["report", run_dir.to_str().unwrap(), run_dir.to_str().unwrap(), "--out"])
        .arg(&merged)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read_report(&merged).unwrap().len(), 2);
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "cotrain.toml"] {
        let cfg = vivi_core::config::ExperimentConfig::load(Some(&root.join(name)), &[]).unwrap();
        assert_eq!(cfg.train.lambda, 0.5, "{name}");
    }
}
