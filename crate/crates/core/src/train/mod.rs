//! Multitask pretraining on base classes, k-fold partitioning and best
//! checkpoint selection.

mod corpus;

pub use corpus::{load_base_corpus, BaseClip, Corpus};

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{steplr, Adam, Tape, Var};
use crate::error::{Error, Result};
use crate::framing::{balanced_order, WindowBatch};
use crate::ingest::RunConfig;
use crate::model::{reduce_mask, select_tc_window, tc_vector, BnMode, BnStats, Model, ModelConfig};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    /// Adds the foreground/background branch to the loss.
    pub multitask: bool,
    /// Cap on optimizer steps per epoch; 0 means none.
    pub max_steps: usize,
    pub kfold: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrainPlan {
            epochs: cfg.iters,
            lr: cfg.lr_pretrain,
            step_size: cfg.step_size,
            gamma: cfg.gamma,
            multitask: cfg.multitask,
            max_steps: cfg.pretrain_max_steps,
            kfold: cfg.kfold,
            seed: cfg.seed,
        }
    }
}

/// Loss terms of one training step as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Var,
    /// Absent when the window has no target class.
    pub l2: Option<Var>,
    pub total: Var,
}

/// `l1` is the masked class cross-entropy, `l2` the masked
/// background/foreground cross-entropy, `total = l1 + l2`.
pub fn multitask_loss<T: Real>(
    tape: &mut Tape<T>,
    sed_logits: Var,
    sfbc_logits: Option<Var>,
    sed_labels: &[usize],
    sfbc_labels: &[usize],
    mask: &[bool],
) -> Result<LossVars> {
    let l1 = tape.masked_softmax_ce(sed_logits, sed_labels, mask)?;
    let (l2, total) = match sfbc_logits {
        Some(z) => {
            let l2 = tape.masked_softmax_ce(z, sfbc_labels, mask)?;
            (Some(l2), tape.add(l1, l2)?)
        }
        None => (None, l1),
    };
    Ok(LossVars { l1, l2, total })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l1: f64,
    /// Mean over steps that had a target class.
    pub l2: f64,
    pub l_total: f64,
    pub steps: usize,
    pub holdout_f: Option<f64>,
}

/// A window addressed by clip, speed variant and index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub clip: usize,
    pub variant: usize,
    pub window: usize,
}

/// Event classes with at least one trained frame, ascending.
pub fn target_classes<T>(w: &WindowBatch<T>) -> Vec<usize> {
    let mut cs: Vec<usize> = w
        .sed_labels
        .iter()
        .zip(&w.train_mask)
        .filter(|(&l, &m)| l != 0 && m)
        .map(|(&l, _)| l)
        .collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

fn numeric_context(e: Error, what: String) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} ({what})")),
        other => other,
    }
}

/// One optimizer step on `window`, conditioned on `target` when given.
/// Returns `(l1, l2)`.
fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    windows: &[WindowBatch<T>],
    current: usize,
    target: Option<usize>,
    lr: f64,
) -> Result<(f64, Option<f64>)> {
    let w = &windows[current];
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| true);
    let mut stats = BnStats::default();
    let x = model.input(&mut tape, &w.features)?;
    let emb = model.backbone(&mut tape, &b, x, BnMode::Train, &mut stats)?;
    let sed = model.sed_logits(&mut tape, &b, emb)?;
    let (sfbc, fg) = match target {
        Some(c) => {
            let tc_idx = select_tc_window(windows, c, current)?;
            let tc = &windows[tc_idx];
            let tcx = model.input(&mut tape, &tc_vector(&tc.features, &tc.sed_labels, c))?;
            let tc_emb = model.backbone(&mut tape, &b, tcx, BnMode::Train, &mut BnStats::default())?;
            let active: Vec<bool> = tc.sed_labels.iter().map(|&l| l == c).collect();
            let center = model.pos_center(&mut tape, tc_emb, &reduce_mask(&active, model.config.reduced_frames()))?;
            let z = model.sfbc_logits(&mut tape, &b, emb, center)?;
            let fg: Vec<usize> = w.sed_labels.iter().map(|&l| usize::from(l == c)).collect();
            (Some(z), fg)
        }
        None => (None, vec![0; w.len()]),
    };
    let loss = multitask_loss(&mut tape, sed, sfbc, &w.sed_labels, &fg, &w.train_mask)?;
    let mut grads = tape.backward(loss.total)?;
    let grads = b.collect(&tape, &mut grads);
    adam.step(&mut model.params, &grads, lr)?;
    model.update_running_stats(&stats)?;
    let l1 = tape.value(loss.l1).data()[0].as_f64();
    Ok((l1, loss.l2.map(|v| tape.value(v).data()[0].as_f64())))
}

/// Balanced, shuffled epoch order over the windows of `clips`.
pub fn epoch_order<T>(corpus: &Corpus<T>, clips: &[usize], seed: u64) -> Result<Vec<WindowRef>> {
    let mut refs = Vec::new();
    let mut counts = Vec::new();
    for &c in clips {
        for (v, ws) in corpus.clips[c].variants.iter().enumerate() {
            for (i, w) in ws.iter().enumerate() {
                refs.push(WindowRef {
                    clip: c,
                    variant: v,
                    window: i,
                });
                counts.push((w.pos_frames(), w.neg_frames()));
            }
        }
    }
    Ok(balanced_order(&counts, seed)?.into_iter().map(|i| refs[i]).collect())
}

/// One pass over `order`. With multitask on, every event class trained in a
/// window gets its own conditioned step; windows without one take a
/// class-only step.
pub fn pretrain_epoch<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    corpus: &Corpus<T>,
    order: &[WindowRef],
    plan: &TrainPlan,
    epoch: usize,
) -> Result<EpochMetrics> {
    let lr = steplr(plan.lr, epoch, plan.step_size, plan.gamma);
    let (mut l1_sum, mut l2_sum, mut l2_n, mut steps) = (0.0, 0.0, 0usize, 0usize);
    'outer: for r in order {
        let windows = &corpus.clips[r.clip].variants[r.variant];
        let targets: Vec<Option<usize>> = if plan.multitask {
            let cs = target_classes(&windows[r.window]);
            if cs.is_empty() {
                vec![None]
            } else {
                cs.into_iter().map(Some).collect()
            }
        } else {
            vec![None]
        };
        for t in targets {
            if plan.max_steps > 0 && steps >= plan.max_steps {
                break 'outer;
            }
            let (l1, l2) = train_step(model, adam, windows, r.window, t, lr).map_err(|e| {
                numeric_context(
                    e,
                    format!(
                        "epoch {epoch}, clip {}, variant {}, window {}",
                        r.clip, r.variant, r.window
                    ),
                )
            })?;
            l1_sum += l1;
            if let Some(l2) = l2 {
                l2_sum += l2;
                l2_n += 1;
            }
            steps += 1;
        }
    }
    let n = steps.max(1) as f64;
    let l2 = if l2_n > 0 { l2_sum / l2_n as f64 } else { 0.0 };
    Ok(EpochMetrics {
        epoch,
        l1: l1_sum / n,
        l2,
        l_total: l1_sum / n + l2,
        steps,
        holdout_f: None,
    })
}

/// Frame-level micro F-score of the class head over trained event frames.
pub fn frame_fscore<T: Real>(model: &Model<T>, windows: &[&WindowBatch<T>]) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for w in windows {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let x = model.input(&mut tape, &w.features)?;
        let emb = model.backbone(&mut tape, &b, x, BnMode::Eval, &mut BnStats::default())?;
        let z = model.sed_logits(&mut tape, &b, emb)?;
        let z = tape.value(z);
        for t in 0..w.valid_frames {
            let row = z.row(t);
            let pred = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            let truth = w.sed_labels[t];
            if pred != 0 && pred == truth {
                tp += 1;
            } else {
                fp += usize::from(pred != 0);
                fn_ += usize::from(truth != 0);
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Clip-level partition into `k` folds of near-equal size. With `k = 1`
/// every clip trains and nothing is held out.
pub fn kfold_split(n_clips: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k == 0 || n_clips < k {
        return Err(Error::Validation(format!(
            "cannot split {n_clips} clips into {k} folds"
        )));
    }
    if k == 1 {
        return Ok(vec![Fold {
            train: (0..n_clips).collect(),
            holdout: vec![],
        }]);
    }
    let mut idx: Vec<usize> = (0..n_clips).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let mut holdout: Vec<usize> = idx.iter().copied().skip(f).step_by(k).collect();
            holdout.sort_unstable();
            let train = (0..n_clips).filter(|i| !holdout.contains(i)).collect();
            Fold { train, holdout }
        })
        .collect())
}

/// Index of the best holdout score; ties go to the earliest epoch.
pub fn select_best_fold_model(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Validation("no holdout scores to select from".into()));
    }
    Ok((0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best }))
}

#[derive(Clone, Debug)]
pub struct FoldResult<T> {
    pub fold: usize,
    pub model: Model<T>,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains one model per fold. Each fold keeps the epoch with the best
/// holdout frame F-score, or its last epoch when nothing is held out.
pub fn pretrain<T: Real>(corpus: &Corpus<T>, cfg: &RunConfig) -> Result<Vec<FoldResult<T>>> {
    let plan = TrainPlan::from_config(cfg);
    let folds = kfold_split(corpus.clips.len(), plan.kfold, plan.seed)?;
    let mut out = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        let mcfg = ModelConfig::from_run(cfg, corpus.classes.len());
        let seed = plan.seed.wrapping_add(f as u64);
        let mut model = Model::new(mcfg, corpus.classes.names().to_vec(), seed)?;
        let mut adam = Adam::new();
        let mut metrics = Vec::new();
        let mut best: Option<(usize, f64, IndexMap<_, _>, IndexMap<_, _>)> = None;
        let holdout: Vec<&WindowBatch<T>> = fold
            .holdout
            .iter()
            .flat_map(|&c| corpus.clips[c].variants[0].iter())
            .collect();
        for epoch in 0..plan.epochs {
            let order_seed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let order = epoch_order(corpus, &fold.train, order_seed)?;
            let mut m = pretrain_epoch(&mut model, &mut adam, corpus, &order, &plan, epoch)?;
            if !holdout.is_empty() {
                let score = frame_fscore(&model, &holdout)?;
                m.holdout_f = Some(score);
                if best.as_ref().is_none_or(|b| score > b.1) {
                    best = Some((epoch, score, model.params.clone(), model.buffers.clone()));
                }
            }
            info!(
                "fold {f} epoch {epoch}: l1 {:.4} l2 {:.4} total {:.4} steps {} holdout {:?}",
                m.l1, m.l2, m.l_total, m.steps, m.holdout_f
            );
            metrics.push(m);
        }
        let best_epoch = match best {
            Some((e, _, params, buffers)) => {
                model.params = params;
                model.buffers = buffers;
                e
            }
            None => plan.epochs - 1,
        };
        debug!("fold {f} keeps epoch {best_epoch}");
        out.push(FoldResult {
            fold: f,
            model,
            best_epoch,
            metrics,
        });
    }
    Ok(out)
}

/// `fold,epoch,l1,l2,l_total,holdout_f` rows, holdout left empty when absent.
pub fn write_metrics_csv<T>(path: &Path, results: &[FoldResult<T>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("fold,epoch,l1,l2,l_total,holdout_f\n");
    for r in results {
        for m in &r.metrics {
            let h = m.holdout_f.map(|v| format!("{v:.6}")).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{h}\n",
                r.fold, m.epoch, m.l1, m.l2, m.l_total
            ));
        }
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
