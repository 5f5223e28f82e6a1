use std::collections::HashMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aug::{time_filter_aug, AugSpec};
use super::similarity::{l2_normalize, masked_mean};
use super::supports::SupportWindow;
use super::{center_tensor, CacheKey, CachedWindow, PreparedTask};
use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ingest::{GraftMode, RunConfig};
use crate::model::{reduce_mask, tc_vector, BnMode, BnStats, Bound, Model, ParamGroup};
use crate::scalar::Real;
use crate::train::Corpus;

/// Outputs of the frozen first two conv blocks, keyed by window.
#[derive(Clone, Debug, Default)]
pub struct StemCache<T> {
    stems: HashMap<CacheKey, Tensor<T>>,
}

impl<T: Real> StemCache<T> {
    pub fn new() -> Self {
        StemCache { stems: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn stem(&mut self, model: &Model<T>, key: CacheKey, features: &ndarray::Array2<T>) -> Result<&Tensor<T>> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.stems.entry(key) {
            let t = compute_stem(model, features)?;
            e.insert(t);
        }
        Ok(&self.stems[&key])
    }

    /// Inference embedding through the cached stem.
    pub fn embed(&mut self, model: &Model<T>, key: CacheKey, features: &ndarray::Array2<T>) -> Result<Tensor<T>> {
        let stem = self.stem(model, key, features)?.clone();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let emb = head(model, &mut tape, &b, stem)?;
        Ok(tape.value(emb).clone())
    }
}

pub(crate) fn compute_stem<T: Real>(model: &Model<T>, features: &ndarray::Array2<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let x = model.input(&mut tape, features)?;
    let h = model.stem(&mut tape, &b, x, BnMode::Eval, &mut BnStats::default())?;
    Ok(tape.value(h).clone())
}

fn head<T: Real>(model: &Model<T>, tape: &mut Tape<T>, b: &Bound, stem: Tensor<T>) -> Result<Var> {
    let h = tape.constant(stem);
    model.head(tape, b, h, BnMode::Eval, &mut BnStats::default())
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, T::lit(1.0 / terms.len() as f64))
}

fn with_context(e: Error, what: &str, it: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} ({what}, iteration {it})")),
        other => other,
    }
}

fn row_of<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Overwrites the background row of the class decoder.
pub fn graft_background_row<T: Real>(model: &mut Model<T>, row: &[T]) -> Result<()> {
    let w = model.param_mut("decoder_sed.weight")?;
    let (_, cols) = w.dims2()?;
    if row.len() != cols {
        return Err(Error::Shape(format!(
            "graft row of {} for {cols}-wide decoder",
            row.len()
        )));
    }
    w.row_mut(0).copy_from_slice(row);
    Ok(())
}

/// Starts the binary decoder from prototypes: row 1 is the POS center, row 0
/// the normalized mean embedding of NEG frames in the first support windows.
pub fn init_binary_decoder<T: Real>(
    model: &mut Model<T>,
    cache: &mut StemCache<T>,
    windows: &[CachedWindow<'_, T>],
    center: &[f64],
) -> Result<()> {
    let reduced = model.config.reduced_frames();
    let mut sum = vec![0.0; center.len()];
    let mut n = 0usize;
    for w in windows.iter().take(8) {
        let emb = cache.embed(model, w.key, &w.window.window.features)?;
        let neg: Vec<bool> = reduce_mask(&w.window.pos_mask(), reduced).iter().map(|&p| !p).collect();
        if let Ok(m) = masked_mean(&emb, &neg) {
            sum.iter_mut().zip(&m).for_each(|(s, v)| *s += v);
            n += 1;
        }
    }
    let neg = match (n > 0).then(|| l2_normalize(&sum)).flatten() {
        Some(v) => v,
        None => center.iter().map(|v| -v).collect(),
    };
    let w = model.param_mut("decoder_bin.weight")?;
    w.row_mut(0).copy_from_slice(&row_of::<T>(&neg));
    w.row_mut(1).copy_from_slice(&row_of::<T>(center));
    model.param_mut("decoder_bin.bias")?.data_mut().fill(T::zero());
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SedReport {
    /// Mean binary loss of the support windows, per iteration.
    pub bin_loss: Vec<f64>,
    /// Mean class loss of the mixed task, per iteration.
    pub sed_loss: Vec<f64>,
    pub base_pool: usize,
}

fn sed_trainable(name: &str) -> bool {
    !matches!(
        ParamGroup::of(name),
        ParamGroup::Stem | ParamGroup::Embed | ParamGroup::Transformer
    )
}

/// Step one of fine-tuning. The binary decoder learns POS/NEG on support
/// windows while the class decoder learns a mixed task: support POS frames as
/// class 0 and base-class event frames as their own class, background
/// frames masked. Conv blocks 3 and 4 and the decoders train.
pub fn finetune_sed<T: Real>(
    model: &mut Model<T>,
    cache: &mut StemCache<T>,
    windows: &[CachedWindow<'_, T>],
    base: Option<&Corpus<T>>,
    center: &[f64],
    cfg: &RunConfig,
    seed: u64,
) -> Result<SedReport> {
    if windows.is_empty() {
        return Err(Error::Degenerate("no support windows to fine-tune on".into()));
    }
    if cfg.graft == GraftMode::PosCenter {
        graft_background_row(model, &row_of::<T>(center))?;
    }
    let pool: Vec<(usize, usize, usize)> = base
        .map(|c| {
            c.clips
                .iter()
                .enumerate()
                .flat_map(|(ci, clip)| {
                    clip.variants.iter().enumerate().flat_map(move |(vi, ws)| {
                        ws.iter()
                            .enumerate()
                            .filter(|(_, w)| w.pos_frames() > 0)
                            .map(move |(wi, _)| (ci, vi, wi))
                    })
                })
                .collect()
        })
        .unwrap_or_default();
    let spec = AugSpec::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F17E);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = Vec::new();
    let mut report = SedReport {
        base_pool: pool.len(),
        ..SedReport::default()
    };
    let batch = cfg.finetune_batch.max(1);
    for it in 0..cfg.finetune_iters {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, sed_trainable);
        let (mut bin_terms, mut sed_terms) = (Vec::new(), Vec::new());
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..windows.len()).collect();
                order.shuffle(&mut rng);
            }
            let w = windows[order.pop().expect("refilled")];
            let sw = &w.window.window;
            let stem = if cfg.time_filter_aug && it >= cfg.aug_start_iter {
                compute_stem(model, &time_filter_aug(&sw.features, &spec, &mut rng))?
            } else {
                cache.stem(model, w.key, &sw.features)?.clone()
            };
            let emb = head(model, &mut tape, &b, stem)?;
            let zb = model.bin_logits(&mut tape, &b, emb)?;
            bin_terms.push(tape.masked_softmax_ce(zb, &sw.sed_labels, &sw.train_mask)?);
            let pos = w.window.pos_mask();
            if pos.iter().any(|&p| p) {
                let zs = model.sed_logits(&mut tape, &b, emb)?;
                sed_terms.push(tape.masked_softmax_ce(zs, &vec![0; pos.len()], &pos)?);
            }
        }
        if let Some(c) = base {
            for _ in 0..cfg.base_batch.min(pool.len()) {
                let (ci, vi, wi) = pool[rng.random_range(0..pool.len())];
                let bw = &c.clips[ci].variants[vi][wi];
                let key = CacheKey::Base {
                    clip: ci,
                    variant: vi,
                    window: wi,
                };
                let stem = cache.stem(model, key, &bw.features)?.clone();
                let emb = head(model, &mut tape, &b, stem)?;
                let zs = model.sed_logits(&mut tape, &b, emb)?;
                let mask: Vec<bool> = bw
                    .train_mask
                    .iter()
                    .zip(&bw.sed_labels)
                    .map(|(&m, &l)| m && l != 0)
                    .collect();
                if mask.iter().any(|&m| m) {
                    sed_terms.push(tape.masked_softmax_ce(zs, &bw.sed_labels, &mask)?);
                }
            }
        }
        let bin = mean_of(&mut tape, &bin_terms)?;
        report.bin_loss.push(scalar(&tape, bin));
        let total = if sed_terms.is_empty() {
            report.sed_loss.push(0.0);
            bin
        } else {
            let sed = mean_of(&mut tape, &sed_terms)?;
            report.sed_loss.push(scalar(&tape, sed));
            tape.add(bin, sed)?
        };
        let mut grads = tape
            .backward(total)
            .map_err(|e| with_context(e, "SED fine-tuning", it))?;
        let grads = b.collect(&tape, &mut grads);
        adam.step(&mut model.params, &grads, cfg.lr_sed)
            .map_err(|e| with_context(e, "SED fine-tuning", it))?;
    }
    if cfg.graft == GraftMode::BinaryClassOne {
        let row = model.param("decoder_bin.weight")?.row(1).to_vec();
        graft_background_row(model, &row)?;
    }
    debug!(
        "SED fine-tuning: bin loss {:.4} -> {:.4}",
        report.bin_loss.first().copied().unwrap_or(0.0),
        report.bin_loss.last().copied().unwrap_or(0.0)
    );
    Ok(report)
}

/// POS probability of every frame of a window from the binary decoder.
pub(crate) fn bin_probs<T: Real>(model: &Model<T>, emb: &Tensor<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let e = tape.constant(emb.clone());
    let z = model.bin_logits(&mut tape, &b, e)?;
    Ok(pos_probs(tape.value(z)))
}

/// Softmax probability of class 1 for each row of `[rows×2]` logits.
pub(crate) fn pos_probs<T: Real>(z: &Tensor<T>) -> Vec<f64> {
    (0..z.shape()[0])
        .map(|r| {
            let row = z.row(r);
            1.0 / (1.0 + (row[0].as_f64() - row[1].as_f64()).exp())
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub cycles_run: usize,
    pub cycles_skipped: usize,
    /// Confident (POS, NEG) frame counts per cycle.
    pub confident: Vec<(usize, usize)>,
}

fn refine_trainable(name: &str) -> bool {
    matches!(ParamGroup::of(name), ParamGroup::Head | ParamGroup::DecoderBin)
}

/// Frame labels and mask from POS probabilities: label 1 at or above
/// `pos`, label 0 at or below `neg`, masked otherwise and beyond `valid`.
pub fn pseudo_labels(probs: &[f64], valid: usize, pos: f64, neg: f64) -> (Vec<usize>, Vec<bool>) {
    let mut labels = vec![0usize; probs.len()];
    let mut mask = vec![false; probs.len()];
    for t in 0..valid.min(probs.len()) {
        if probs[t] >= pos {
            labels[t] = 1;
            mask[t] = true;
        } else if probs[t] <= neg {
            mask[t] = true;
        }
    }
    (labels, mask)
}

/// Pseudo-labels query frames from the binary decoder (POS at or above
/// `pseudo_pos`, NEG at or below `pseudo_neg`, the rest masked) and trains
/// conv blocks 3 and 4 with the binary decoder on them, once per cycle.
/// Cycles without confident frames are skipped.
pub fn pseudo_label_refine<T: Real>(
    model: &mut Model<T>,
    cache: &mut StemCache<T>,
    task: &PreparedTask<T>,
    cfg: &RunConfig,
    seed: u64,
) -> Result<RefineReport> {
    let win = cfg.win_frames;
    let query = task.query(cfg);
    let mut report = RefineReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9_5E0D);
    for cycle in 0..cfg.pseudo_cycles {
        let mut labelled = Vec::new();
        let (mut n_pos, mut n_neg) = (0, 0);
        for q in &query {
            let emb = cache.embed(model, CacheKey::Query(q.start), &task.query_features(q, win))?;
            let p = bin_probs(model, &emb)?;
            let (labels, mask) = pseudo_labels(&p, q.valid, cfg.pseudo_pos, cfg.pseudo_neg);
            let pos = labels.iter().filter(|&&l| l == 1).count();
            n_pos += pos;
            n_neg += mask.iter().filter(|&&m| m).count() - pos;
            if mask.iter().any(|&m| m) {
                labelled.push((*q, labels, mask));
            }
        }
        report.confident.push((n_pos, n_neg));
        if labelled.is_empty() {
            warn!("pseudo-label cycle {cycle} has no confident frames; skipped");
            report.cycles_skipped += 1;
            continue;
        }
        let mut adam = Adam::new();
        for it in 0..cfg.pseudo_iters {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, refine_trainable);
            let mut terms = Vec::new();
            for _ in 0..cfg.finetune_batch.max(1) {
                let (q, labels, mask) = &labelled[rng.random_range(0..labelled.len())];
                let stem = cache
                    .stem(model, CacheKey::Query(q.start), &task.query_features(q, win))?
                    .clone();
                let emb = head(model, &mut tape, &b, stem)?;
                let z = model.bin_logits(&mut tape, &b, emb)?;
                terms.push(tape.masked_softmax_ce(z, labels, mask)?);
            }
            let loss = mean_of(&mut tape, &terms)?;
            let mut grads = tape
                .backward(loss)
                .map_err(|e| with_context(e, "pseudo-label refinement", it))?;
            let grads = b.collect(&tape, &mut grads);
            adam.step(&mut model.params, &grads, cfg.lr_sed)
                .map_err(|e| with_context(e, "pseudo-label refinement", it))?;
        }
        report.cycles_run += 1;
        debug!("pseudo-label cycle {cycle}: {n_pos} POS, {n_neg} NEG frames");
    }
    Ok(report)
}

/// Mean POS center of the Support₁ windows: each window is reduced to its
/// POS frames (other frames zeroed), encoded, and averaged over POS frames.
pub fn sfbc_center<T: Real>(model: &Model<T>, support1: &[SupportWindow<T>]) -> Result<Vec<T>> {
    if support1.is_empty() {
        return Err(Error::Degenerate("Support1 is empty".into()));
    }
    let reduced = model.config.reduced_frames();
    let mut sum = vec![0.0; model.config.emb_dim];
    for w in support1 {
        let emb = model.embed(&tc_vector(&w.window.features, &w.window.sed_labels, 1))?;
        let c = masked_mean(&emb, &reduce_mask(&w.pos_mask(), reduced))?;
        sum.iter_mut().zip(&c).for_each(|(s, v)| *s += v);
    }
    Ok(sum.iter().map(|s| T::lit(s / support1.len() as f64)).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SfbcReport {
    pub loss: Vec<f64>,
    pub train_windows: usize,
    /// Frame accuracy on the held-out tail of Support₂.
    pub holdout_accuracy: Option<f64>,
}

/// Trains the SFBC decoder on Support₂ windows conditioned on `center`. The
/// encoder layer and everything below it stay fixed, so tokens are computed
/// once. Windows from `train_n` on are held out and scored.
pub fn finetune_sfbc<T: Real>(
    model: &mut Model<T>,
    cache: &mut StemCache<T>,
    center: &[T],
    support2: &[SupportWindow<T>],
    train_n: usize,
    cfg: &RunConfig,
    seed: u64,
) -> Result<SfbcReport> {
    let mut tokens = Vec::with_capacity(support2.len());
    for (i, w) in support2.iter().enumerate() {
        let emb = cache.embed(model, CacheKey::Support2(i), &w.window.features)?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let e = tape.constant(emb);
        let c = tape.constant(center_tensor(center));
        let tok = model.sfbc_tokens(&mut tape, &b, e, c)?;
        tokens.push(tape.value(tok).clone());
    }
    let mut report = SfbcReport {
        train_windows: train_n,
        ..SfbcReport::default()
    };
    if train_n == 0 {
        warn!("no Support2 windows to train the SFBC decoder on; skipped");
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5FBC);
        let mut adam = Adam::new();
        for it in 0..cfg.sfbc_iters {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, |n| ParamGroup::of(n) == ParamGroup::DecoderSfbc);
            let mut terms = Vec::new();
            for _ in 0..cfg.finetune_batch.max(1) {
                let i = rng.random_range(0..train_n);
                let w = &support2[i].window;
                let tok = tape.constant(tokens[i].clone());
                let z = model.sfbc_decode(&mut tape, &b, tok)?;
                terms.push(tape.masked_softmax_ce(z, &w.sed_labels, &w.train_mask)?);
            }
            let loss = mean_of(&mut tape, &terms)?;
            report.loss.push(scalar(&tape, loss));
            let mut grads = tape
                .backward(loss)
                .map_err(|e| with_context(e, "SFBC fine-tuning", it))?;
            let grads = b.collect(&tape, &mut grads);
            adam.step(&mut model.params, &grads, cfg.lr_sfbc)
                .map_err(|e| with_context(e, "SFBC fine-tuning", it))?;
        }
    }
    if train_n < support2.len() {
        let (mut right, mut total) = (0usize, 0usize);
        for (i, w) in support2.iter().enumerate().skip(train_n) {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, |_| false);
            let tok = tape.constant(tokens[i].clone());
            let z = model.sfbc_decode(&mut tape, &b, tok)?;
            let p = pos_probs(tape.value(z));
            for (t, &l) in w.window.sed_labels.iter().enumerate() {
                right += usize::from(usize::from(p[t] > 0.5) == l);
                total += 1;
            }
        }
        report.holdout_accuracy = Some(right as f64 / total.max(1) as f64);
    }
    Ok(report)
}
