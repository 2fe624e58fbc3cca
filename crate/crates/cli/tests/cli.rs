use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scda::io::checkpoint::{load_checkpoint, save_checkpoint};
use scda::io::lock::LOCK_FILE;
use scda::io::report::read_eval;

const TINY: &str = r#"
seeds = [0, 1]

[pretrain]
n_iterations = 3
episodes_per_batch = 4

[adapt]
n_iterations = 2
episodes_per_batch = 2

[ewc]
fisher_samples = 200

[eval]
episodes_per_target = 2
"#;

fn scda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scda"))
        .args(args)
        .output()
        .expect("spawn scda")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the tiny config and pretrains into `dir/pre`.
fn pretrained(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let pre = dir.join("pre");
    let o = scda(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--out",
        s(&pre),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    pre.join("pretrain.ckpt")
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["frobnicate"],
        vec!["pretrain", "--seed", "0", "--out", "x", "--bogus"],
        vec![
            "adapt",
            "--checkpoint",
            "c",
            "--strategy",
            "xyz",
            "--domain",
            "d",
            "--seed",
            "0",
            "--out",
            "o",
        ],
        vec![],
    ] {
        let o = scda(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert!(
            err.contains("Usage") || err.contains("possible values"),
            "{args:?}: {err}"
        );
    }
}

#[test]
fn zero_shot_eval_matches_checkpoint_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let zs = dir.path().join("zs");
    let o = scda(&[
        "adapt",
        "--checkpoint",
        s(&ckpt),
        "--strategy",
        "zs",
        "--domain",
        "realistic",
        "--seed",
        "3",
        "--out",
        s(&zs),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let raw = dir.path().join("eval_raw");
    let adapted = dir.path().join("eval_zs");
    assert!(scda(&["eval", "--checkpoint", s(&ckpt), "--out", s(&raw)])
        .status
        .success());
    let o = scda(&[
        "eval",
        "--checkpoint",
        s(&zs.join("snapshot_3.ckpt")),
        "--out",
        s(&adapted),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let a = read_eval(&raw.join("eval.csv")).unwrap();
    let b = read_eval(&adapted.join("eval.csv")).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(b.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.target_id, y.target_id);
        assert_eq!(
            (x.episode_reward, x.episode_cost),
            (y.episode_reward, y.episode_cost)
        );
    }
    assert_eq!(b[0].strategy, "zs");
    assert_eq!(b[0].adapted_target, 4);

    let one = dir.path().join("eval_one");
    assert!(scda(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--targets",
        "2",
        "--out",
        s(&one)
    ])
    .status
    .success());
    assert_eq!(read_eval(&one.join("eval.csv")).unwrap().len(), 1);
    let o = scda(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--targets",
        "9",
        "--out",
        s(&one.join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ewc_strategy_needs_fisher() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let mut c = load_checkpoint(&ckpt).unwrap();
    c.fisher = None;
    c.snapshot = None;
    let bare = dir.path().join("bare.ckpt");
    save_checkpoint(&c, &bare).unwrap();
    let o = scda(&[
        "adapt",
        "--checkpoint",
        s(&bare),
        "--strategy",
        "scda",
        "--domain",
        "realistic",
        "--seed",
        "3",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Fisher"), "{}", stderr(&o));
}

#[test]
fn pretrain_metrics_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let again = dir.path().join("again");
    let o = scda(&[
        "pretrain",
        "--config",
        s(&dir.path().join("tiny.toml")),
        "--seed",
        "3",
        "--out",
        s(&again),
    ]);
    assert!(o.status.success());
    let a = fs::read(ckpt.parent().unwrap().join("metrics.csv")).unwrap();
    let b = fs::read(again.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(again.join("pretrain.ckpt")).unwrap()
    );
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join(LOCK_FILE), "1\n").unwrap();
    let o = scda(&["pretrain", "--seed", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn adapt_fisher_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let run = dir.path().join("scda");
    let o = scda(&[
        "adapt",
        "--checkpoint",
        s(&ckpt),
        "--strategy",
        "SCDA",
        "--domain",
        "realistic",
        "--seed",
        "3",
        "--out",
        s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!run.join(LOCK_FILE).exists());
    // 4 targets x 2 iterations
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 9);

    let fisher = dir.path().join("fisher");
    let o = scda(&[
        "fisher",
        "--before",
        s(&ckpt),
        "--after",
        s(&run.join("snapshot_3.ckpt")),
        "--out",
        s(&fisher),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(fisher.join("fisher.csv"))
            .unwrap()
            .lines()
            .count(),
        129
    );
    assert!(fs::read_to_string(fisher.join("fisher_summary.txt"))
        .unwrap()
        .contains("spearman = "));

    let snaps: Vec<PathBuf> = (0..4)
        .map(|k| run.join(format!("snapshot_{k}.ckpt")))
        .collect();
    let mut args = vec!["eval", "--out", s(&run)];
    args.push("--checkpoint");
    args.extend(snaps.iter().map(|p| s(p)));
    let o = scda(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_eval(&run.join("eval.csv")).unwrap().len(), 16);

    let report = dir.path().join("out").join("report.md");
    let o = scda(&["report", "--in", s(dir.path()), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(&report).unwrap();
    assert!(md.contains("| adapt | scda | 1 |"));
    assert!(md.contains("| pretrain | pretrain | 1 |"));
    assert!(md.contains("| scda | 1 |"));
    assert!(dir
        .path()
        .join("out")
        .join("report_adapt_total.svg")
        .exists());
}
