//! Frame probabilities to events, event matching and F-scores, and fold
//! fusion.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnnotationEvent, AnnotationRow, RunConfig, SHOTS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    /// Mean probability over the event's frames.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub threshold: f64,
    pub median_width: usize,
    pub min_dur_s: f64,
    pub merge_gap_s: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            threshold: 0.5,
            median_width: 5,
            min_dur_s: 0.06,
            merge_gap_s: 0.1,
        }
    }
}

impl DecodeParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        DecodeParams {
            threshold: cfg.threshold,
            median_width: cfg.median_width,
            min_dur_s: cfg.min_dur_s,
            merge_gap_s: cfg.merge_gap_s,
        }
    }
}

/// Running median of odd width with edge values repeated; width 0 or 1 is
/// the identity.
pub fn median_filter(x: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 || x.is_empty() {
        return x.to_vec();
    }
    let half = width / 2;
    let n = x.len() as isize;
    let mut buf = Vec::with_capacity(2 * half + 1);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend((i - half as isize..=i + half as isize).map(|j| x[j.clamp(0, n - 1) as usize]));
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect()
}

/// Median filter, threshold (`p >= threshold`), maximal runs, merging of
/// runs closer than `merge_gap_s`, then removal of events shorter than
/// `min_dur_s`. Frame `i` starts at `start_s + i * period`.
pub fn decode_events(probs: &[f64], period: f64, start_s: f64, p: &DecodeParams) -> Vec<DetectedEvent> {
    let smooth = median_filter(probs, p.median_width);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < smooth.len() {
        if smooth[i] >= p.threshold {
            let a = i;
            while i < smooth.len() && smooth[i] >= p.threshold {
                i += 1;
            }
            runs.push((a, i));
        } else {
            i += 1;
        }
    }
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for r in runs {
        match merged.last_mut() {
            Some(last) if ((r.0 - last.1) as f64) * period < p.merge_gap_s => last.1 = r.1,
            _ => merged.push(r),
        }
    }
    merged
        .into_iter()
        .filter(|&(a, b)| (b - a) as f64 * period >= p.min_dur_s)
        .map(|(a, b)| DetectedEvent {
            onset_s: start_s + a as f64 * period,
            offset_s: start_s + b as f64 * period,
            score: smooth[a..b].iter().sum::<f64>() / (b - a) as f64,
        })
        .collect()
}

pub fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// One-to-one greedy matching in descending IoU order; pairs at or above
/// `iou_min` count as hits. Equal IoUs go to the lower prediction index,
/// then the lower reference index.
pub fn match_events(pred: &[(f64, f64)], reference: &[(f64, f64)], iou_min: f64) -> MatchCounts {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        for (j, &r) in reference.iter().enumerate() {
            let v = iou(p, r);
            if v >= iou_min && v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_r) = (vec![false; pred.len()], vec![false; reference.len()]);
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_r[j] {
            used_p[i] = true;
            used_r[j] = true;
            tp += 1;
        }
    }
    MatchCounts {
        tp,
        fp: pred.len() - tp,
        fn_: reference.len() - tp,
    }
}

/// Size of a maximum one-to-one matching among pairs with IoU at or above
/// `iou_min` (augmenting paths).
pub fn optimal_match_count(pred: &[(f64, f64)], reference: &[(f64, f64)], iou_min: f64) -> usize {
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|&p| {
            (0..reference.len())
                .filter(|&j| {
                    let v = iou(p, reference[j]);
                    v >= iou_min && v > 0.0
                })
                .collect()
        })
        .collect();
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; reference.len()];
    (0..pred.len())
        .filter(|&i| augment(i, &adj, &mut vec![false; reference.len()], &mut owner))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip: String,
    #[serde(flatten)]
    pub counts: MatchCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub clips: Vec<ClipScore>,
}

/// Sums counts over clips, then computes precision, recall and F.
pub fn fscore(clips: &[ClipScore]) -> ScoreReport {
    let tp: usize = clips.iter().map(|c| c.counts.tp).sum();
    let fp: usize = clips.iter().map(|c| c.counts.fp).sum();
    let fn_: usize = clips.iter().map(|c| c.counts.fn_).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ScoreReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f,
        clips: clips.to_vec(),
    }
}

impl ScoreReport {
    /// Aligned text table, one row per clip plus the total.
    pub fn to_table(&self) -> String {
        let width = self.clips.iter().map(|c| c.clip.len()).max().unwrap_or(0).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>5} {:>5} {:>5}", "clip", "TP", "FP", "FN");
        for c in &self.clips {
            let _ = writeln!(
                s,
                "{:<width$}  {:>5} {:>5} {:>5}",
                c.clip, c.counts.tp, c.counts.fp, c.counts.fn_
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>5} {:>5} {:>5}", "total", self.tp, self.fp, self.fn_);
        let _ = writeln!(
            s,
            "precision {:.4}  recall {:.4}  F {:.4}",
            self.precision, self.recall, self.f
        );
        s
    }
}

/// Mean of aligned per-model probability sequences.
pub fn fuse_fold_predictions(models: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Validation("no predictions to fuse".into()))?;
    if models.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Shape("fold predictions differ in length".into()));
    }
    Ok((0..first.len())
        .map(|t| models.iter().map(|m| m[t]).sum::<f64>() / models.len() as f64)
        .collect())
}

/// Scores prediction rows against reference rows file by file. In each
/// reference file the first five POS events are the support and are not
/// scored, and predictions ending before the fifth POS offset are dropped.
pub fn evaluate_rows(pred: &[AnnotationRow], reference: &[AnnotationRow], iou_min: f64) -> Result<ScoreReport> {
    let mut refs: BTreeMap<&str, Vec<&AnnotationEvent>> = BTreeMap::new();
    for r in reference.iter().filter(|r| r.event.label == "POS") {
        refs.entry(r.file.as_str()).or_default().push(&r.event);
    }
    let mut preds: BTreeMap<&str, Vec<&AnnotationEvent>> = BTreeMap::new();
    for p in pred {
        if !refs.contains_key(p.file.as_str()) {
            return Err(Error::Validation(format!("prediction for unknown file {}", p.file)));
        }
        preds.entry(p.file.as_str()).or_default().push(&p.event);
    }
    let mut clips = Vec::new();
    for (file, mut evs) in refs {
        evs.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        let query_start = evs.get(SHOTS - 1).map_or(0.0, |e| e.offset_s);
        let r: Vec<(f64, f64)> = evs.iter().skip(SHOTS).map(|e| (e.onset_s, e.offset_s)).collect();
        let p: Vec<(f64, f64)> = preds
            .get(file)
            .map(|v| {
                v.iter()
                    .filter(|e| e.offset_s > query_start)
                    .map(|e| (e.onset_s, e.offset_s))
                    .collect()
            })
            .unwrap_or_default();
        clips.push(ClipScore {
            clip: file.to_string(),
            counts: match_events(&p, &r, iou_min),
        });
    }
    Ok(fscore(&clips))
}

/// Prediction rows for `events` of one audio file.
pub fn event_rows(file: &str, events: &[DetectedEvent]) -> Result<Vec<AnnotationRow>> {
    events
        .iter()
        .map(|e| {
            Ok(AnnotationRow {
                file: file.to_string(),
                event: AnnotationEvent::new(e.onset_s, e.offset_s, "POS")?,
            })
        })
        .collect()
}
