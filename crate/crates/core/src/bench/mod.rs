//! Desk-scale end-to-end benchmark on the synthetic corpus with ablation
//! rows.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{decode_events, evaluate_rows, event_rows, DecodeParams, ScoreReport};
use crate::fewshot::{adapt_task, prepare_task, AdaptOptions, PreparedTask, QueryProbs};
use crate::ingest::synth::{generate, Split, SynthFile};
use crate::ingest::{make_support_task, synth_task_set, AnnotationRow, RunConfig, SynthSpec};
use crate::model::Model;
use crate::scalar::Real;
use crate::train::{pretrain, Corpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Toggles {
    pub multitask: bool,
    pub transformer: bool,
    pub time_filter_aug: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        multitask: true,
        transformer: true,
        time_filter_aug: true,
    };

    pub fn label(&self) -> String {
        if *self == Self::FULL {
            return "full".into();
        }
        let mut off = Vec::new();
        if !self.multitask {
            off.push("-multitask");
        }
        if !self.transformer {
            off.push("-transformer");
        }
        if !self.time_filter_aug {
            off.push("-aug");
        }
        off.join(" ")
    }

    fn apply(&self, cfg: &RunConfig) -> RunConfig {
        RunConfig {
            multitask: self.multitask,
            use_transformer: self.transformer,
            time_filter_aug: self.time_filter_aug,
            ..cfg.clone()
        }
    }
}

/// Settings of the reduced model and schedule used by the benchmark.
pub fn bench_config() -> RunConfig {
    RunConfig {
        channels: 32,
        emb_dim: 32,
        heads: 8,
        ffn_dim: 256,
        kfold: 1,
        iters: 2,
        pretrain_max_steps: 300,
        speed_factors: vec![1.0],
        sfbc_iters: 30,
        pseudo_cycles: 2,
        pseudo_iters: 10,
        ..RunConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub synth: SynthSpec,
    pub config: RunConfig,
    /// The full system is always run; these rows are added after it.
    pub ablations: Vec<Toggles>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        let t = Toggles::FULL;
        BenchSpec {
            synth: SynthSpec::default(),
            config: bench_config(),
            ablations: vec![
                Toggles { multitask: false, ..t },
                Toggles {
                    transformer: false,
                    ..t
                },
                Toggles {
                    time_filter_aug: false,
                    ..t
                },
            ],
        }
    }
}

impl BenchSpec {
    pub fn rows(&self) -> Vec<Toggles> {
        let mut rows = vec![Toggles::FULL];
        rows.extend(self.ablations.iter().filter(|t| **t != Toggles::FULL));
        rows
    }

    /// SHA-256 over the run configuration and the corpus specification.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_kv().as_bytes());
        h.update(serde_json::to_string(&self.synth).unwrap_or_default().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f: f64,
    pub f_before_refine: f64,
    pub sfbc_holdout_accuracy: Option<f64>,
    pub refine_cycles_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub toggles: Toggles,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Micro F of the same row scored before pseudo-label refinement.
    pub f_before_refine: f64,
    pub tasks: Vec<TaskScore>,
}

/// Work counts; wall-clock time is reported separately so the report stays
/// reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTimings {
    pub base_windows: usize,
    pub pretrain_steps: BTreeMap<String, usize>,
    pub finetune_iters_per_task: usize,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    pub timings: BenchTimings,
}

impl BenchReport {
    pub fn full(&self) -> &BenchRow {
        &self.rows[0]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub report: BenchReport,
    /// Seconds spent per stage, in run order.
    pub wall_s: Vec<(String, f64)>,
}

fn task_rows(file: &SynthFile) -> Vec<AnnotationRow> {
    file.events
        .iter()
        .map(|e| AnnotationRow {
            file: file.name.clone(),
            event: e.clone(),
        })
        .collect()
}

fn score(file: &SynthFile, probs: &QueryProbs, dp: &DecodeParams, iou: f64) -> Result<ScoreReport> {
    let events = decode_events(&probs.probs, probs.frame_period_s, probs.start_s(), dp);
    log::debug!(
        "{}: predicted {:?}",
        file.name,
        events.iter().map(|e| (e.onset_s, e.offset_s)).collect::<Vec<_>>()
    );
    log::debug!(
        "{}: reference {:?}",
        file.name,
        file.events.iter().map(|e| (e.onset_s, e.offset_s)).collect::<Vec<_>>()
    );
    evaluate_rows(&event_rows(&file.name, &events)?, &task_rows(file), iou)
}

struct TaskResult {
    after: ScoreReport,
    before: ScoreReport,
    sfbc_acc: Option<f64>,
    cycles: usize,
}

fn run_task<T: Real>(
    model: &Model<T>,
    prepared: &PreparedTask<T>,
    file: &SynthFile,
    corpus: &Corpus<T>,
    cfg: &RunConfig,
    opts: AdaptOptions,
    seed: u64,
) -> Result<TaskResult> {
    let dp = DecodeParams::from_config(cfg);
    let out = adapt_task(model, prepared, Some(corpus), cfg, opts, seed)?;
    let before = out.probs_before_refine.as_ref().expect("requested");
    Ok(TaskResult {
        after: score(file, &out.probs, &dp, cfg.iou)?,
        before: score(file, before, &dp, cfg.iou)?,
        sfbc_acc: out.task.meta.sfbc.as_ref().and_then(|s| s.holdout_accuracy),
        cycles: out.task.meta.refine.cycles_run,
    })
}

/// Generates the corpus, pretrains once per distinct backbone setting and
/// adapts every novel task for every row. Tasks run on up to `jobs` threads;
/// results do not depend on `jobs`. When `data_dir` is given the corpus is
/// also written there.
pub fn run_bench<T: Real>(spec: &BenchSpec, seed: u64, jobs: usize, data_dir: Option<&Path>) -> Result<BenchOutcome> {
    let mut wall = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, wall: &mut Vec<(String, f64)>| {
        wall.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let cfg = RunConfig {
        seed,
        ..spec.config.clone()
    };
    cfg.validate()?;
    let files = match data_dir {
        Some(d) => synth_task_set(&spec.synth, seed, d)?,
        None => generate(&spec.synth, seed)?,
    };
    let base: Vec<_> = files
        .iter()
        .filter(|f| f.split == Split::Base)
        .map(|f| (f.name.clone(), f.clip.cast::<T>(), f.events.clone()))
        .collect();
    let novel: Vec<&SynthFile> = files.iter().filter(|f| f.split == Split::Novel).collect();
    if novel.is_empty() {
        return Err(Error::Validation("benchmark needs at least one novel task".into()));
    }
    let corpus = Corpus::build(&base, &cfg)?;
    let prepared: Vec<PreparedTask<T>> = novel
        .iter()
        .map(|f| prepare_task(&f.name, &make_support_task(f.clip.cast::<T>(), &f.events)?, &cfg))
        .collect::<Result<_>>()?;
    lap("features", &mut wall);

    let rows = spec.rows();
    let mut models: BTreeMap<(bool, bool), Model<T>> = BTreeMap::new();
    let mut steps = BTreeMap::new();
    for t in &rows {
        let key = (t.multitask, t.transformer);
        if models.contains_key(&key) {
            continue;
        }
        let mut results = pretrain(&corpus, &t.apply(&cfg))?;
        let name = format!("multitask={} transformer={}", t.multitask, t.transformer);
        steps.insert(name.clone(), results[0].metrics.iter().map(|m| m.steps).sum());
        info!("pretrained {name}");
        models.insert(key, results.remove(0).model);
        lap(&format!("pretrain {name}"), &mut wall);
    }

    let mut out_rows = Vec::new();
    for t in &rows {
        let rcfg = t.apply(&cfg);
        let model = &models[&(t.multitask, t.transformer)];
        let opts = AdaptOptions {
            sfbc: t.multitask,
            score_before_refine: true,
        };
        let results = run_tasks(jobs, prepared.len(), |i| {
            run_task(
                model,
                &prepared[i],
                novel[i],
                &corpus,
                &rcfg,
                opts,
                seed.wrapping_add(1000 + i as u64),
            )
        })?;
        let after = crate::eval::fscore(&results.iter().flat_map(|r| r.after.clips.clone()).collect::<Vec<_>>());
        let before = crate::eval::fscore(&results.iter().flat_map(|r| r.before.clips.clone()).collect::<Vec<_>>());
        let tasks = results
            .iter()
            .zip(&novel)
            .map(|(r, f)| TaskScore {
                task: f.name.clone(),
                tp: r.after.tp,
                fp: r.after.fp,
                fn_: r.after.fn_,
                f: r.after.f,
                f_before_refine: r.before.f,
                sfbc_holdout_accuracy: r.sfbc_acc,
                refine_cycles_run: r.cycles,
            })
            .collect();
        info!("{}: F {:.4} (before refinement {:.4})", t.label(), after.f, before.f);
        out_rows.push(BenchRow {
            label: t.label(),
            toggles: *t,
            precision: after.precision,
            recall: after.recall,
            f: after.f,
            tp: after.tp,
            fp: after.fp,
            fn_: after.fn_,
            f_before_refine: before.f,
            tasks,
        });
        lap(&format!("adapt {}", t.label()), &mut wall);
    }
    Ok(BenchOutcome {
        report: BenchReport {
            config_hash: spec.hash(),
            seed,
            rows: out_rows,
            timings: BenchTimings {
                base_windows: corpus.window_count(),
                pretrain_steps: steps,
                finetune_iters_per_task: cfg.finetune_iters,
                tasks: prepared.len(),
            },
        },
        wall_s: wall,
    })
}

/// Runs `f(0..n)` on up to `jobs` threads and returns results in index order.
fn run_tasks<R: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| s.spawn(move || (j..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("bench worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every task ran")).collect()
}
