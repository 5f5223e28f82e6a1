//! Frame labels, fixed-length training windows, the overlap-once mask and
//! balanced oversampling.

use std::collections::HashMap;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::FrameFeatures;
use crate::error::{Error, Result};
use crate::ingest::AnnotationEvent;
use crate::scalar::Real;

pub const BACKGROUND: &str = "background";

/// Class names by index; index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new<S: AsRef<str>>(classes: &[S]) -> Result<Self> {
        let mut names = vec![BACKGROUND.to_string()];
        let mut index = HashMap::new();
        for c in classes {
            let c = c.as_ref();
            if c == BACKGROUND || index.contains_key(c) {
                return Err(Error::Validation(format!("duplicate or reserved class name {c:?}")));
            }
            index.insert(c.to_string(), names.len());
            names.push(c.to_string());
        }
        Ok(ClassMap { names, index })
    }

    /// Sorted distinct labels of `events`.
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a AnnotationEvent>) -> Result<Self> {
        let mut labels: Vec<&str> = events.into_iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        Self::new(&labels)
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown class {name:?}")))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Number of classes including background.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.len() == 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Frame `t` takes class `k` when its center `(t + 1/2) · period` lies in
/// `[onset, offset)` of an event of class `k`. Later onsets win overlaps.
pub fn label_frames(
    n_frames: usize,
    frame_period_s: f64,
    events: &[AnnotationEvent],
    classes: &ClassMap,
) -> Result<Vec<usize>> {
    let mut labels = vec![0usize; n_frames];
    let mut order: Vec<&AnnotationEvent> = events.iter().collect();
    order.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    for ev in order {
        let k = classes.index(&ev.label)?;
        let lo = ((ev.onset_s / frame_period_s).floor() as isize - 1).max(0) as usize;
        let hi = ((ev.offset_s / frame_period_s).ceil() as usize + 1).min(n_frames);
        for (t, slot) in labels.iter_mut().enumerate().take(hi).skip(lo) {
            let center = t as f64 * frame_period_s + frame_period_s / 2.0;
            if center >= ev.onset_s && center < ev.offset_s {
                *slot = k;
            }
        }
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch<T> {
    /// `[win × bands]`; padded frames repeat the last real frame.
    pub features: Array2<T>,
    pub sed_labels: Vec<usize>,
    /// 1 where any event is active.
    pub sfbc_labels: Vec<u8>,
    pub train_mask: Vec<bool>,
    pub window_start_frame: usize,
    /// Real (unpadded) frames in this window.
    pub valid_frames: usize,
    pub source_id: usize,
}

impl<T> WindowBatch<T> {
    pub fn len(&self) -> usize {
        self.sed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sed_labels.is_empty()
    }

    /// Event frames that are trained in this window.
    pub fn pos_frames(&self) -> usize {
        self.sed_labels
            .iter()
            .zip(&self.train_mask)
            .filter(|(&l, &m)| l != 0 && m)
            .count()
    }

    pub fn neg_frames(&self) -> usize {
        self.sed_labels
            .iter()
            .zip(&self.train_mask)
            .filter(|(&l, &m)| l == 0 && m)
            .count()
    }
}

/// Window count for `n_frames`: `max(1, ceil((T - win) / shift) + 1)`.
pub fn window_count(n_frames: usize, win: usize, shift: usize) -> usize {
    if n_frames <= win {
        1
    } else {
        (n_frames - win).div_ceil(shift) + 1
    }
}

pub fn segment_windows<T: Real>(
    features: &FrameFeatures<T>,
    labels: &[usize],
    win: usize,
    shift: usize,
    source_id: usize,
) -> Result<Vec<WindowBatch<T>>> {
    let (n, bands) = features.values.dim();
    if !(win > shift && shift > 0) {
        return Err(Error::Config(format!("need win > shift > 0, got {win} and {shift}")));
    }
    if n == 0 {
        return Err(Error::Validation("cannot window an empty feature matrix".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} frames", labels.len())));
    }
    let mut out = Vec::new();
    for w in 0..window_count(n, win, shift) {
        let start = w * shift;
        let valid = win.min(n - start);
        let mut feats = Array2::zeros((win, bands));
        feats
            .slice_mut(s![..valid, ..])
            .assign(&features.values.slice(s![start..start + valid, ..]));
        let last = features.values.row(start + valid - 1);
        for i in valid..win {
            feats.row_mut(i).assign(&last);
        }
        let mut sed = vec![0usize; win];
        sed[..valid].copy_from_slice(&labels[start..start + valid]);
        let sfbc = sed.iter().map(|&l| u8::from(l != 0)).collect();
        let mask = (0..win).map(|i| i < valid).collect();
        out.push(WindowBatch {
            features: feats,
            sed_labels: sed,
            sfbc_labels: sfbc,
            train_mask: mask,
            window_start_frame: start,
            valid_frames: valid,
            source_id,
        });
    }
    Ok(out)
}

/// Event frames are trained only in the first window containing them;
/// background frames stay trained everywhere except padding.
pub fn build_overlap_mask<T>(windows: &mut [WindowBatch<T>]) {
    let end = windows
        .iter()
        .map(|w| w.window_start_frame + w.valid_frames)
        .max()
        .unwrap_or(0);
    let mut seen = vec![false; end];
    for w in windows.iter_mut() {
        for i in 0..w.valid_frames {
            if w.sed_labels[i] == 0 {
                continue;
            }
            let abs = w.window_start_frame + i;
            w.train_mask[i] = !seen[abs];
            seen[abs] = true;
        }
    }
}

/// Labels, windows and masks one clip.
pub fn frame_clip<T: Real>(
    features: &FrameFeatures<T>,
    events: &[AnnotationEvent],
    classes: &ClassMap,
    win: usize,
    shift: usize,
    source_id: usize,
) -> Result<Vec<WindowBatch<T>>> {
    let labels = label_frames(features.n_frames(), features.frame_period_s, events, classes)?;
    let mut windows = segment_windows(features, &labels, win, shift, source_id)?;
    build_overlap_mask(&mut windows);
    Ok(windows)
}

/// Epoch order in which windows holding event frames are oversampled (with
/// replacement) until trained event frames reach the background frames of
/// event-free windows. The order is shuffled by `seed`.
pub fn balanced_sample_indices<T>(windows: &[WindowBatch<T>], seed: u64) -> Result<Vec<usize>> {
    let counts: Vec<(usize, usize)> = windows.iter().map(|w| (w.pos_frames(), w.neg_frames())).collect();
    balanced_order(&counts, seed)
}

/// [`balanced_sample_indices`] over `(event frames, background frames)` counts.
pub fn balanced_order(counts: &[(usize, usize)], seed: u64) -> Result<Vec<usize>> {
    let pos_windows: Vec<usize> = (0..counts.len()).filter(|&i| counts[i].0 > 0).collect();
    if pos_windows.is_empty() {
        return Err(Error::Validation("no event frames to balance against".into()));
    }
    let mut pos: usize = pos_windows.iter().map(|&i| counts[i].0).sum();
    let neg: usize = counts.iter().filter(|c| c.0 == 0).map(|c| c.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    while pos < neg {
        let i = pos_windows[rng.random_range(0..pos_windows.len())];
        order.push(i);
        pos += counts[i].0;
    }
    order.shuffle(&mut rng);
    Ok(order)
}

#[cfg(test)]
mod tests;
