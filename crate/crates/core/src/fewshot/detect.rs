use serde::{Deserialize, Serialize};

use super::finetune::{pos_probs, StemCache};
use super::{center_tensor, CacheKey, PreparedTask};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::ingest::RunConfig;
use crate::model::Model;
use crate::scalar::Real;

/// POS probability per frame from `start_frame` to the end of the clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryProbs {
    pub start_frame: usize,
    pub frame_period_s: f64,
    pub probs: Vec<f64>,
}

impl QueryProbs {
    pub fn start_s(&self) -> f64 {
        self.start_frame as f64 * self.frame_period_s
    }
}

/// Arithmetic mean of the two branch probabilities.
pub fn fuse_branches(p_bin: f64, p_sfbc: f64) -> f64 {
    0.5 * (p_bin + p_sfbc)
}

/// Scores every query window and averages overlapping windows per frame.
/// With an SFBC center both branches are fused, otherwise the binary
/// decoder decides alone.
pub fn detect<T: Real>(
    model: &Model<T>,
    task: &PreparedTask<T>,
    sfbc_center: Option<&[T]>,
    cache: &mut StemCache<T>,
    cfg: &RunConfig,
) -> Result<QueryProbs> {
    let win = cfg.win_frames;
    let n = task.features.n_frames();
    let qs = task.query_start_frame;
    let mut per_window = Vec::new();
    for q in &task.query(cfg) {
        let emb = cache.embed(model, CacheKey::Query(q.start), &task.query_features(q, win))?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| false);
        let e = tape.constant(emb);
        let zb = model.bin_logits(&mut tape, &b, e)?;
        let pb = pos_probs(tape.value(zb));
        let ps = match sfbc_center {
            Some(c) => {
                let c = tape.constant(center_tensor(c));
                let zs = model.sfbc_logits(&mut tape, &b, e, c)?;
                Some(pos_probs(tape.value(zs)))
            }
            None => None,
        };
        let p: Vec<f64> = (0..q.valid)
            .map(|t| match &ps {
                Some(ps) => fuse_branches(pb[t], ps[t]),
                None => pb[t],
            })
            .collect();
        per_window.push((q.start - qs, p));
    }
    Ok(QueryProbs {
        start_frame: qs,
        frame_period_s: task.features.frame_period_s,
        probs: overlap_average(&per_window, n - qs),
    })
}

/// Mean of window predictions `(start, probs)` per frame over `len` frames;
/// uncovered frames are 0.
pub fn overlap_average(windows: &[(usize, Vec<f64>)], len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut count = vec![0usize; len];
    for (start, p) in windows {
        for (t, &v) in p.iter().enumerate() {
            if let Some(s) = sum.get_mut(start + t) {
                *s += v;
                count[start + t] += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect()
}
