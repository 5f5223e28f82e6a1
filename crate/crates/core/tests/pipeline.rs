//! Whole pipeline through the public API on a tiny corpus written to disk.

use std::path::Path;

use fsed::eval::{decode_events, evaluate_rows, event_rows, DecodeParams};
use fsed::fewshot::{adapt_task, prepare_task, AdaptOptions};
use fsed::ingest::{
    make_support_task, read_annotation_rows, read_annotations, read_wav, synth_task_set, write_events_csv, RunConfig,
    SynthSpec,
};
use fsed::train::{load_base_corpus, pretrain, write_metrics_csv};

fn spec() -> SynthSpec {
    SynthSpec {
        base_clip_s: 10.0,
        base_events_per_file: 4,
        base_cross_events: 1,
        novel_clip_s: 30.0,
        novel_pos_events: 10,
        novel_distractors: 2,
        ..SynthSpec::default()
    }
}

fn config() -> RunConfig {
    RunConfig::parse(
        "channels = 4\nemb_dim = 8\nheads = 2\nffn_dim = 16\niters = 2\npretrain_max_steps = 4\nkfold = 2\n\
         speed_factors = 0.9, 1.0\nfinetune_iters = 4\naug_start_iter = 2\nsfbc_iters = 2\npseudo_cycles = 1\n\
         pseudo_iters = 2\nsupport_windows = 8\nseed = 5\n",
    )
    .unwrap()
}

fn run(dir: &Path) -> (Vec<f64>, fsed::eval::ScoreReport) {
    let cfg = config();
    synth_task_set(&spec(), 21, dir).unwrap();
    let corpus = load_base_corpus::<f64>(&dir.join("base"), &cfg).unwrap();
    assert_eq!(corpus.clips.len(), 4);
    assert!(corpus.clips.iter().all(|c| c.variants.len() == 2));
    let folds = pretrain(&corpus, &cfg).unwrap();
    assert_eq!(folds.len(), 2);
    assert!(folds.iter().all(|f| f.metrics.iter().all(|m| m.holdout_f.is_some())));
    write_metrics_csv(&dir.join("metrics.csv"), &folds).unwrap();
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);

    let wav = dir.join("novel/task_00_tone_1500.wav");
    let csv = dir.join("novel/task_00_tone_1500.csv");
    let task = make_support_task(read_wav::<f64>(&wav).unwrap(), &read_annotations(&csv).unwrap()).unwrap();
    let prepared = prepare_task("task_00_tone_1500", &task, &cfg).unwrap();
    let out = adapt_task(
        &folds[0].model,
        &prepared,
        Some(&corpus),
        &cfg,
        AdaptOptions::default(),
        9,
    )
    .unwrap();
    assert!(out.probs.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!((out.probs.start_s() - task.query_start_s).abs() <= cfg.frame_period_s());

    let events = decode_events(
        &out.probs.probs,
        out.probs.frame_period_s,
        out.probs.start_s(),
        &DecodeParams::from_config(&cfg),
    );
    let pred = dir.join("pred.csv");
    write_events_csv(&pred, &event_rows("task_00_tone_1500.wav", &events).unwrap()).unwrap();
    let pred_rows = read_annotation_rows(&pred, false).unwrap();
    assert_eq!(pred_rows.len(), events.len());
    for (r, e) in pred_rows.iter().zip(&events) {
        assert!((r.event.onset_s - e.onset_s).abs() < 1e-6 && (r.event.offset_s - e.offset_s).abs() < 1e-6);
    }
    let report = evaluate_rows(&pred_rows, &read_annotation_rows(&csv, false).unwrap(), cfg.iou).unwrap();
    (out.probs.probs, report)
}

#[test]
fn synthetic_pipeline_runs_end_to_end_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (pa, ra) = run(a.path());
    let (pb, rb) = run(b.path());
    // Ten POS events, the first five are shots.
    assert_eq!(ra.tp + ra.fn_, 5);
    assert!((0.0..=1.0).contains(&ra.f));
    assert_eq!(pa, pb);
    assert_eq!(ra, rb);
}

#[test]
fn perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    synth_task_set(&spec(), 4, dir.path()).unwrap();
    let csv = dir.path().join("novel/task_01_chirp_4800.csv");
    let rows = read_annotation_rows(&csv, false).unwrap();
    let report = evaluate_rows(&rows, &rows, 0.3).unwrap();
    assert_eq!((report.tp, report.fp, report.fn_), (5, 0, 0));
    assert_eq!(report.f, 1.0);
}
