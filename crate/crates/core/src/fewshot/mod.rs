//! Task adaptation: support reconstruction, TimeFilterAug, SED and SFBC
//! fine-tuning with pseudo-label refinement, and query detection.

mod aug;
mod detect;
mod finetune;
mod similarity;
mod supports;

pub use aug::{apply_gains, time_filter_aug, zone_gains, AugSpec};
pub use detect::{detect, fuse_branches, overlap_average, QueryProbs};
pub use finetune::{
    finetune_sed, finetune_sfbc, graft_background_row, init_binary_decoder, pseudo_label_refine, pseudo_labels,
    sfbc_center, RefineReport, SedReport, SfbcReport, StemCache,
};
pub use similarity::{l2_normalize, masked_mean, neg_quota, pos_center, query_similarity, reconstruct_negatives};
pub use supports::{build_supports, NegOrigin, NegPiece, NegSnippet, ReconstructedSupports, Shot, SupportWindow};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Tensor};
use crate::dsp::{extract_features, speed_perturb, FrameFeatures};
use crate::error::{Error, Result};
use crate::ingest::{RunConfig, SupportTask};
use crate::model::{reduce_mask, Model};
use crate::scalar::Real;
use crate::train::Corpus;

/// Frames whose centers fall in `[onset, offset)`, at least one frame.
pub fn frame_span(onset_s: f64, offset_s: f64, period: f64, n_frames: usize) -> (usize, usize) {
    let idx = |t: f64| ((t / period - 0.5).ceil().max(0.0) as usize).min(n_frames);
    let (a, b) = (idx(onset_s), idx(offset_s));
    if b > a {
        (a, b)
    } else {
        let a = a.min(n_frames.saturating_sub(1));
        (a, a + 1)
    }
}

/// `win` frames starting at `start`, with out-of-range frames copied from the
/// nearest edge.
pub fn window_at<T: Real>(values: &Array2<T>, start: isize, win: usize) -> Array2<T> {
    let n = values.nrows() as isize;
    let mut out = Array2::zeros((win, values.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let src = (start + i as isize).clamp(0, n - 1) as usize;
        row.assign(&values.row(src));
    }
    out
}

/// A query-region window: its start frame and how many real frames it has.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryWindow {
    pub start: usize,
    pub valid: usize,
}

/// Windows from `from` to the end of the clip with the given shift.
pub fn query_windows(n_frames: usize, from: usize, win: usize, shift: usize) -> Vec<QueryWindow> {
    let mut out = Vec::new();
    let mut start = from;
    while start < n_frames {
        out.push(QueryWindow {
            start,
            valid: win.min(n_frames - start),
        });
        if start + win >= n_frames {
            break;
        }
        start += shift;
    }
    out
}

/// Features and support material of one few-shot task.
#[derive(Clone, Debug)]
pub struct PreparedTask<T> {
    pub name: String,
    /// Original-speed features of the whole clip.
    pub features: FrameFeatures<T>,
    pub shots: Vec<Shot<T>>,
    /// Gaps between annotated POS events, every speed variant.
    pub gaps: Vec<NegSnippet<T>>,
    /// Original-speed frame ranges of the five shots.
    pub shot_spans: Vec<(usize, usize)>,
    pub query_start_s: f64,
    pub query_start_frame: usize,
}

impl<T: Real> PreparedTask<T> {
    pub fn query(&self, cfg: &RunConfig) -> Vec<QueryWindow> {
        query_windows(
            self.features.n_frames(),
            self.query_start_frame,
            cfg.win_frames,
            cfg.shift_frames,
        )
    }

    pub fn query_features(&self, q: &QueryWindow, win: usize) -> Array2<T> {
        window_at(&self.features.values, q.start as isize, win)
    }
}

/// Extracts features for every speed factor and cuts POS shots and NEG gaps.
pub fn prepare_task<T: Real>(name: &str, task: &SupportTask<T>, cfg: &RunConfig) -> Result<PreparedTask<T>> {
    let mut shots = Vec::new();
    let mut gaps = Vec::new();
    let mut original = None;
    for (v, &factor) in cfg.speed_factors.iter().enumerate() {
        let (feats, scale) = if factor == 1.0 {
            (extract_features(&task.clip, cfg)?, 1.0)
        } else {
            let (audio, scale) = speed_perturb(&task.clip, factor)?;
            (extract_features(&audio, cfg)?, scale)
        };
        let (n, p) = (feats.n_frames(), feats.frame_period_s);
        for (i, e) in task.pos_events.iter().enumerate() {
            let (a, b) = frame_span(e.onset_s * scale, e.offset_s * scale, p, n);
            shots.push(Shot {
                variant: v,
                index: i,
                frames: feats.values.slice(s![a..b, ..]).to_owned(),
            });
        }
        for (g, e) in task.neg_intervals.iter().enumerate() {
            let (a, b) = frame_span(e.onset_s * scale, e.offset_s * scale, p, n);
            gaps.push(NegSnippet {
                origin: NegOrigin::Annotated { variant: v, gap: g },
                frames: feats.values.slice(s![a..b, ..]).to_owned(),
            });
        }
        if factor == 1.0 {
            original = Some(feats);
        }
    }
    let features = match original {
        Some(f) => f,
        None => extract_features(&task.clip, cfg)?,
    };
    let (n, p) = (features.n_frames(), features.frame_period_s);
    let shot_spans = task
        .pos_events
        .iter()
        .map(|e| frame_span(e.onset_s, e.offset_s, p, n))
        .collect();
    let query_start_frame = ((task.query_start_s / p - 0.5).ceil().max(0.0) as usize).min(n);
    if query_start_frame >= n {
        return Err(Error::Task(format!("task {name} has no query region")));
    }
    Ok(PreparedTask {
        name: name.to_string(),
        features,
        shots,
        gaps,
        shot_spans,
        query_start_s: task.query_start_s,
        query_start_frame,
    })
}

/// Embedding of each original-speed shot: the shot is centered in a window
/// of real context and its POS frames are averaged.
pub fn shot_embeddings<T: Real>(model: &Model<T>, task: &PreparedTask<T>) -> Result<Vec<Vec<f64>>> {
    let win = model.config.win_frames;
    task.shot_spans
        .iter()
        .map(|&(a, b)| {
            let len = (b - a).min(win);
            let start = a as isize + (len / 2) as isize - (win / 2) as isize;
            let frames = window_at(&task.features.values, start, win);
            let off = (a as isize - start) as usize;
            let mask: Vec<bool> = (0..win).map(|t| t >= off && t < off + len).collect();
            let emb = model.embed(&frames)?;
            masked_mean(&emb, &reduce_mask(&mask, model.config.reduced_frames()))
        })
        .collect()
}

/// Which parts of adaptation run; bench ablations switch these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptOptions {
    /// Fine-tune and fuse the SFBC branch; otherwise detection uses the
    /// binary classifier alone.
    pub sfbc: bool,
    /// Also report detection before pseudo-label refinement.
    pub score_before_refine: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            sfbc: true,
            score_before_refine: false,
        }
    }
}

/// A fine-tuned task model plus the SFBC conditioning center.
#[derive(Clone, Debug)]
pub struct AdaptedTask<T> {
    pub model: Model<T>,
    pub sfbc_center: Option<Vec<T>>,
    pub meta: TaskMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub name: String,
    pub query_start_s: f64,
    pub pos_center: Vec<f64>,
    pub query_windows: usize,
    pub neg_query_windows: Vec<usize>,
    pub sed: SedReport,
    pub refine: RefineReport,
    pub sfbc: Option<SfbcReport>,
}

/// Result of [`adapt_task`]: the adapted task and, when requested, the
/// query probabilities before refinement.
#[derive(Clone, Debug)]
pub struct Adaptation<T> {
    pub task: AdaptedTask<T>,
    pub probs: QueryProbs,
    pub probs_before_refine: Option<QueryProbs>,
}

/// Full adaptation of a pretrained model to one task.
pub fn adapt_task<T: Real>(
    pretrained: &Model<T>,
    task: &PreparedTask<T>,
    base: Option<&Corpus<T>>,
    cfg: &RunConfig,
    opts: AdaptOptions,
    seed: u64,
) -> Result<Adaptation<T>> {
    let mut model = pretrained.clone();
    let win = cfg.win_frames;
    let center = pos_center(&shot_embeddings(&model, task)?)?;

    let query = task.query(cfg);
    let mut cache = StemCache::new();
    let mut scores = Vec::with_capacity(query.len());
    for q in &query {
        let emb = cache.embed(&model, CacheKey::Query(q.start), &task.query_features(q, win))?;
        scores.push(query_similarity(&emb, &center)?.1);
    }
    let picked = reconstruct_negatives(&scores, neg_quota(query.len(), cfg.neg_quota_frac, cfg.neg_quota_min));
    let mut negs = task.gaps.clone();
    negs.retain(|g| g.frames.nrows() > 0);
    for &i in &picked {
        let q = &query[i];
        negs.push(NegSnippet {
            origin: NegOrigin::Query { window: i },
            frames: task
                .features
                .values
                .slice(s![q.start..q.start + q.valid, ..])
                .to_owned(),
        });
    }
    let supports = ReconstructedSupports {
        support1: build_supports(&task.shots, &negs, cfg.support_windows, win, seed)?,
        support2: build_supports(&task.shots, &negs, cfg.support_windows, win, seed.wrapping_add(1))?,
    };
    let holdout = sfbc_holdout_len(supports.support2.len());
    let train_s2 = supports.support2.len() - holdout;

    let mut sed_windows: Vec<CachedWindow<'_, T>> = Vec::new();
    for (i, w) in supports.support1.iter().enumerate() {
        sed_windows.push(CachedWindow::new(CacheKey::Support1(i), w));
    }
    for (i, w) in supports.support2[..train_s2].iter().enumerate() {
        sed_windows.push(CachedWindow::new(CacheKey::Support2(i), w));
    }
    init_binary_decoder(&mut model, &mut cache, &sed_windows, &center)?;
    let sed = finetune_sed(&mut model, &mut cache, &sed_windows, base, &center, cfg, seed)?;

    let fit_sfbc = |model: &mut Model<T>, cache: &mut StemCache<T>| -> Result<(Vec<T>, SfbcReport)> {
        let c = sfbc_center(model, &supports.support1)?;
        let report = finetune_sfbc(model, cache, &c, &supports.support2, train_s2, cfg, seed)?;
        Ok((c, report))
    };

    let probs_before_refine = if opts.score_before_refine {
        let mut snapshot = model.clone();
        let c = match opts.sfbc {
            true => Some(fit_sfbc(&mut snapshot, &mut cache)?.0),
            false => None,
        };
        Some(detect(&snapshot, task, c.as_deref(), &mut cache, cfg)?)
    } else {
        None
    };

    let refine = pseudo_label_refine(&mut model, &mut cache, task, cfg, seed)?;
    let (sfbc_center_vec, sfbc_report) = match opts.sfbc {
        true => {
            let (c, r) = fit_sfbc(&mut model, &mut cache)?;
            (Some(c), Some(r))
        }
        false => (None, None),
    };
    let probs = detect(&model, task, sfbc_center_vec.as_deref(), &mut cache, cfg)?;
    Ok(Adaptation {
        task: AdaptedTask {
            model,
            sfbc_center: sfbc_center_vec,
            meta: TaskMeta {
                name: task.name.clone(),
                query_start_s: task.query_start_s,
                pos_center: center,
                query_windows: query.len(),
                neg_query_windows: picked,
                sed,
                refine,
                sfbc: sfbc_report,
            },
        },
        probs,
        probs_before_refine,
    })
}

/// Support₂ windows kept out of SFBC training for the accuracy check.
pub fn sfbc_holdout_len(n: usize) -> usize {
    if n < 4 {
        0
    } else {
        n.div_ceil(4)
    }
}

/// Identifies windows whose frozen stem output can be reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheKey {
    Support1(usize),
    Support2(usize),
    Query(usize),
    Base { clip: usize, variant: usize, window: usize },
}

/// A training window together with its cache key.
#[derive(Clone, Copy, Debug)]
pub struct CachedWindow<'a, T> {
    pub key: CacheKey,
    pub window: &'a SupportWindow<T>,
}

impl<'a, T> CachedWindow<'a, T> {
    pub fn new(key: CacheKey, window: &'a SupportWindow<T>) -> Self {
        CachedWindow { key, window }
    }
}

impl<T: Real> AdaptedTask<T> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let center: Option<Vec<f64>> = self
            .sfbc_center
            .as_ref()
            .map(|c| c.iter().map(|v| v.as_f64()).collect());
        let extra = serde_json::json!({ "task": self.meta, "sfbc_center": center });
        Ok(self.model.to_checkpoint(extra))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, extra) = Model::from_checkpoint(ck)?;
        let meta: TaskMeta = serde_json::from_value(extra["task"].clone())
            .map_err(|e| Error::Format(format!("task checkpoint metadata: {e}")))?;
        let center: Option<Vec<f64>> = serde_json::from_value(extra["sfbc_center"].clone())
            .map_err(|e| Error::Format(format!("task checkpoint center: {e}")))?;
        Ok(AdaptedTask {
            model,
            sfbc_center: center.map(|c| c.into_iter().map(T::lit).collect()),
            meta,
        })
    }
}

/// Row `[1×emb]` tensor of a center vector.
pub(crate) fn center_tensor<T: Real>(c: &[T]) -> Tensor<T> {
    Tensor::new([1, c.len()], c.to_vec()).expect("center shape")
}

#[cfg(test)]
mod tests;
