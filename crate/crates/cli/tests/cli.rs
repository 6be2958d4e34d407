use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssoc(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssoc"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("SSOC_THREADS", t),
        None => cmd.env_remove("SSOC_THREADS"),
    };
    cmd.output().expect("spawn ssoc")
}

fn ok(args: &[&str]) -> String {
    let out = ssoc(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates and splits a mixture; returns the split directory.
fn prepare(root: &Path, extra: &[&str]) -> PathBuf {
    let raw = root.join("raw");
    let mut args = vec!["gen-synth", "--out", s(&raw), "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args);
    let split = root.join("split");
    ok(&["split", "--input", s(&raw.join("points.emb")), "--out", s(&split), "--seed", "3"]);
    split
}

const SMALL: &[&str] = &["--classes", "4", "--dim", "8", "--per-class", "40"];

fn train_args<'a>(split: &'a Path, out: &'a Path, epochs: &'a str) -> Vec<String> {
    [
        "train",
        "--config",
        s(&split.join("split.cfg")),
        "--labeled",
        s(&split.join("labeled.emb")),
        "--unlabeled",
        s(&split.join("unlabeled.emb")),
        "--out",
        s(out),
        "--seed",
        "3",
        "--epochs",
        epochs,
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

fn run_train(split: &Path, out: &Path, epochs: &str, threads: Option<&str>) {
    let args = train_args(split, out, epochs);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = ssoc(&refs, threads);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn eval(split: &Path, checkpoint: &Path) -> Vec<f64> {
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(checkpoint),
        "--unlabeled",
        s(&split.join("unlabeled.emb")),
        "--sidecar",
        s(&split.join("truth.lab")),
    ]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("seen_acc,novel_acc,all_acc,novel_nmi"));
    lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn separated_mixture_trains_to_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), &[]);
    let run = dir.path().join("run");
    run_train(&split, &run, "100", None);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,total,ce_l,ce_u,bce,re,lr,selected_pseudo,pseudo_acc\n"));
    let report = eval(&split, &run.join("model.ckpt"));
    assert!(report[2] >= 0.95, "{report:?}");
}

#[test]
fn training_never_needs_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), SMALL);
    let with_truth = dir.path().join("a");
    run_train(&split, &with_truth, "3", None);
    std::fs::remove_file(split.join("truth.lab")).unwrap();
    let without = dir.path().join("b");
    run_train(&split, &without, "3", None);
    assert_eq!(
        std::fs::read(with_truth.join("metrics.csv")).unwrap(),
        std::fs::read(without.join("metrics.csv")).unwrap()
    );
}

#[test]
fn metrics_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), &["--classes", "6", "--dim", "12", "--per-class", "60"]);
    let runs: Vec<(PathBuf, Option<&str>)> = vec![
        (dir.path().join("r1"), None),
        (dir.path().join("r2"), None),
        (dir.path().join("r3"), Some("4")),
    ];
    for (out, threads) in &runs {
        run_train(&split, out, "8", *threads);
    }
    let first = std::fs::read(runs[0].0.join("metrics.csv")).unwrap();
    for (out, _) in &runs[1..] {
        assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), first);
        assert_eq!(
            std::fs::read(out.join("model.ckpt")).unwrap(),
            std::fs::read(runs[0].0.join("model.ckpt")).unwrap()
        );
    }
}

#[test]
fn resume_keeps_earlier_rows() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), SMALL);
    let run = dir.path().join("run");
    run_train(&split, &run, "4", None);
    let before = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let ckpt = dir.path().join("saved.ckpt");
    std::fs::copy(run.join("model.ckpt"), &ckpt).unwrap();
    let mut args = train_args(&split, &run, "4");
    args.extend(["--resume".to_string(), s(&ckpt).to_string()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), before);
}

#[test]
fn eval_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), SMALL);
    let run = dir.path().join("run");
    run_train(&split, &run, "2", None);
    let ev = dir.path().join("ev");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--unlabeled",
        s(&split.join("unlabeled.emb")),
        "--sidecar",
        s(&split.join("truth.lab")),
        "--out",
        s(&ev),
    ]);
    let preds = std::fs::read_to_string(ev.join("predictions.csv")).unwrap();
    let first = preds.lines().next().unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[0], "0");
    assert!(std::fs::read_to_string(ev.join("eval.csv")).unwrap().starts_with("seen_acc,"));
}

#[test]
fn usage_errors_exit_two_and_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), SMALL);
    let run = dir.path().join("run");
    run_train(&split, &run, "1", None);
    let missing = dir.path().join("missing.lab");
    let out = ssoc(
        &[
            "eval",
            "--checkpoint",
            s(&run.join("model.ckpt")),
            "--unlabeled",
            s(&split.join("unlabeled.emb")),
            "--sidecar",
            s(&missing),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--sidecar") && err.contains("missing.lab"), "{err}");

    let out = ssoc(&["train", "--bogus"], None);
    assert_eq!(out.status.code(), Some(2));

    let mut args = train_args(&split, &dir.path().join("x"), "1");
    args.extend(["--set".into(), "tau_nine=1".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ssoc(&refs, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau_nine"));

    let out = ssoc(&["grad-check", "--instances", "1"], Some("zero"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SSOC_THREADS"));
}

#[test]
fn grad_check_exit_codes() {
    let out = ok(&["grad-check", "--instances", "4", "--seed", "9"]);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("max relative error"), "{out}");
    let out = ssoc(&["grad-check", "--instances", "2", "--tolerance", "0"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tau_sweep_emits_one_csv_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), SMALL);
    let sw = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--kind",
        "tau1",
        "--config",
        s(&split.join("split.cfg")),
        "--labeled",
        s(&split.join("labeled.emb")),
        "--unlabeled",
        s(&split.join("unlabeled.emb")),
        "--sidecar",
        s(&split.join("truth.lab")),
        "--out",
        s(&sw),
        "--epochs",
        "3",
        "--seed",
        "1",
    ]);
    for t in ["0.4", "0.5", "0.6", "0.7", "0.8", "0.9"] {
        assert!(sw.join(format!("tau1_{t}.csv")).is_file(), "{t}");
    }
    let profile = std::fs::read_to_string(sw.join("profile.csv")).unwrap();
    let counts: Vec<usize> = profile.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 6);
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert_eq!(std::fs::read_to_string(sw.join("summary.csv")).unwrap().lines().count(), 7);
}

#[test]
fn weight_sweep_expands_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepare(dir.path(), SMALL);
    let sw = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--kind",
        "weights",
        "--grid",
        "beta=0,0.5;gamma=1,2",
        "--novel-classes",
        "2",
        "--labeled",
        s(&split.join("labeled.emb")),
        "--unlabeled",
        s(&split.join("unlabeled.emb")),
        "--sidecar",
        s(&split.join("truth.lab")),
        "--out",
        s(&sw),
        "--epochs",
        "2",
    ]);
    for cell in ["beta0_gamma1", "beta0_gamma2", "beta0.5_gamma1", "beta0.5_gamma2"] {
        assert!(sw.join(format!("{cell}.csv")).is_file(), "{cell}");
    }
}
