use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::framing::WindowBatch;
use crate::scalar::Real;

/// The frames of one annotated POS event in one speed variant.
#[derive(Clone, Debug)]
pub struct Shot<T> {
    pub variant: usize,
    /// Which of the five annotated events this is.
    pub index: usize,
    pub frames: Array2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegOrigin {
    /// A gap between annotated POS events.
    Annotated { variant: usize, gap: usize },
    /// A low-similarity query window.
    Query { window: usize },
}

#[derive(Clone, Debug)]
pub struct NegSnippet<T> {
    pub origin: NegOrigin,
    pub frames: Array2<T>,
}

/// A run of NEG frames copied from `negs[snippet]` starting at `src_start`
/// into the window at `dst_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegPiece {
    pub snippet: usize,
    pub src_start: usize,
    pub dst_start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct SupportWindow<T> {
    /// Labels are 1 on POS frames, 0 elsewhere; every frame is trained.
    pub window: WindowBatch<T>,
    pub shot: usize,
    pub pos_start: usize,
    pub pos_len: usize,
    pub pieces: Vec<NegPiece>,
}

impl<T> SupportWindow<T> {
    pub fn pos_mask(&self) -> Vec<bool> {
        self.window.sed_labels.iter().map(|&l| l == 1).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructedSupports<T> {
    pub support1: Vec<SupportWindow<T>>,
    pub support2: Vec<SupportWindow<T>>,
}

fn fill<T: Real>(
    out: &mut Array2<T>,
    from: usize,
    to: usize,
    negs: &[NegSnippet<T>],
    rng: &mut ChaCha8Rng,
    pieces: &mut Vec<NegPiece>,
) {
    let mut at = from;
    while at < to {
        let k = rng.random_range(0..negs.len());
        let n = negs[k].frames.nrows();
        let src = rng.random_range(0..n);
        let len = (to - at).min(n - src);
        out.slice_mut(s![at..at + len, ..])
            .assign(&negs[k].frames.slice(s![src..src + len, ..]));
        pieces.push(NegPiece {
            snippet: k,
            src_start: src,
            dst_start: at,
            len,
        });
        at += len;
    }
}

/// `count` windows of `win` frames, each holding one POS shot (cropped to
/// the window when longer) at a random offset with NEG material around it.
pub fn build_supports<T: Real>(
    shots: &[Shot<T>],
    negs: &[NegSnippet<T>],
    count: usize,
    win: usize,
    seed: u64,
) -> Result<Vec<SupportWindow<T>>> {
    if shots.is_empty() || shots.iter().any(|s| s.frames.nrows() == 0) {
        return Err(Error::Degenerate(
            "support construction needs non-empty POS shots".into(),
        ));
    }
    if negs.is_empty() || negs.iter().any(|n| n.frames.nrows() == 0) {
        return Err(Error::Degenerate(
            "support construction needs non-empty NEG material".into(),
        ));
    }
    let bands = shots[0].frames.ncols();
    if shots.iter().any(|s| s.frames.ncols() != bands) || negs.iter().any(|n| n.frames.ncols() != bands) {
        return Err(Error::Shape("POS and NEG material differ in band count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let shot = rng.random_range(0..shots.len());
        let pos_len = shots[shot].frames.nrows().min(win);
        let pos_start = rng.random_range(0..=win - pos_len);
        let mut feats = Array2::zeros((win, bands));
        feats
            .slice_mut(s![pos_start..pos_start + pos_len, ..])
            .assign(&shots[shot].frames.slice(s![..pos_len, ..]));
        let mut pieces = Vec::new();
        fill(&mut feats, 0, pos_start, negs, &mut rng, &mut pieces);
        fill(&mut feats, pos_start + pos_len, win, negs, &mut rng, &mut pieces);
        let labels: Vec<usize> = (0..win)
            .map(|t| usize::from((pos_start..pos_start + pos_len).contains(&t)))
            .collect();
        out.push(SupportWindow {
            window: WindowBatch {
                features: feats,
                sfbc_labels: labels.iter().map(|&l| l as u8).collect(),
                sed_labels: labels,
                train_mask: vec![true; win],
                window_start_frame: 0,
                valid_frames: win,
                source_id: i,
            },
            shot,
            pos_start,
            pos_len,
            pieces,
        });
    }
    Ok(out)
}
