//! Command line behavior: exit codes, outputs confined to --out, and
//! artifacts that the readers accept.

use std::path::Path;
use std::process::{Command, Output};

fn fsed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsed"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

const TINY: &str = "channels = 4\nemb_dim = 8\nheads = 2\nffn_dim = 16\niters = 1\npretrain_max_steps = 3\n\
kfold = 1\nspeed_factors = 1.0\nfinetune_iters = 3\naug_start_iter = 1\nsfbc_iters = 2\npseudo_cycles = 1\n\
pseudo_iters = 1\nsupport_windows = 8\n";

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fsed(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(fsed(&["pretrain"], dir.path()).status.code(), Some(2));
}

#[test]
fn pipeline_failure_reports_its_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsed(&["pretrain", "--data", "missing", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [io]"));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "nope = 1\n").unwrap();
    let out = fsed(
        &["synth-data", "--config", bad.to_str().unwrap(), "--out", "o"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [config]"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fsed(&["gradcheck", "--seeds", "2"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 9 && !text.contains("FAIL"));
}

#[test]
fn commands_chain_and_write_only_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let out = fsed(args, d);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let task = [
        "--wav",
        "data/novel/task_00_tone_1500.wav",
        "--csv",
        "data/novel/task_00_tone_1500.csv",
    ];
    ok(&["synth-data", "--out", "data", "--seed", "3"]);
    ok(&[
        "pretrain",
        "--data",
        "data/base",
        "--out",
        "pre",
        "--config",
        "tiny.cfg",
    ]);
    let mut ft = vec![
        "finetune",
        "--ckpt",
        "pre/model.ckpt",
        "--data",
        "data/base",
        "--out",
        "ft",
        "--config",
        "tiny.cfg",
    ];
    ft.extend(task);
    ok(&ft);
    let mut det = vec![
        "detect",
        "--task-ckpt",
        "ft/task_00_tone_1500.task.ckpt",
        "--out",
        "det",
        "--config",
        "tiny.cfg",
    ];
    det.extend(task);
    ok(&det);
    ok(&[
        "evaluate",
        "--pred",
        "det/events.csv",
        "--ref",
        "data/novel/task_00_tone_1500.csv",
        "--out",
        "ev",
    ]);
    ok(&[
        "features",
        "--wav",
        "data/novel/task_01_chirp_4800.wav",
        "--out",
        "feat",
    ]);

    let mut top: Vec<String> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["data", "det", "ev", "feat", "ft", "pre", "tiny.cfg"]);

    let rows = fsed::ingest::read_annotation_rows(&d.join("det/events.csv"), false).unwrap();
    assert!(rows.iter().all(|r| r.file == "task_00_tone_1500.wav"));
    let report: fsed::eval::ScoreReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/score.json")).unwrap()).unwrap();
    assert_eq!(report.tp + report.fn_, 7);
    assert_eq!(report.tp + report.fp, rows.len());
    let feats = fsed::dsp::read_features::<f32>(&d.join("feat/task_01_chirp_4800.feat")).unwrap();
    assert_eq!(feats.n_bands(), 128);
    let metrics = std::fs::read_to_string(d.join("pre/metrics.csv")).unwrap();
    assert!(metrics.starts_with("fold,epoch,l1,l2,l_total,holdout_f"));
}
