use std::path::Path;

use crate::dsp::{extract_features, speed_perturb};
use crate::error::{Error, Result};
use crate::framing::{frame_clip, ClassMap, WindowBatch};
use crate::ingest::{read_annotations, read_wav, AnnotationEvent, AudioClip, RunConfig};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct BaseClip<T> {
    pub name: String,
    /// Windows of each speed variant, in `speed_factors` order.
    pub variants: Vec<Vec<WindowBatch<T>>>,
}

/// Windowed base-class training material.
#[derive(Clone, Debug)]
pub struct Corpus<T> {
    pub classes: ClassMap,
    pub clips: Vec<BaseClip<T>>,
}

impl<T: Real> Corpus<T> {
    /// Frames every clip once per speed factor. The class map is built from
    /// all event labels.
    pub fn build(clips: &[(String, AudioClip<T>, Vec<AnnotationEvent>)], cfg: &RunConfig) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Validation("base corpus is empty".into()));
        }
        let classes = ClassMap::from_events(clips.iter().flat_map(|c| c.2.iter()))?;
        let mut out = Vec::with_capacity(clips.len());
        for (id, (name, clip, events)) in clips.iter().enumerate() {
            let mut variants = Vec::with_capacity(cfg.speed_factors.len());
            for &factor in &cfg.speed_factors {
                let (audio, scale) = if factor == 1.0 {
                    (clip.clone(), 1.0)
                } else {
                    speed_perturb(clip, factor)?
                };
                let scaled: Vec<AnnotationEvent> = events
                    .iter()
                    .map(|e| AnnotationEvent::new(e.onset_s * scale, e.offset_s * scale, e.label.clone()))
                    .collect::<Result<_>>()?;
                let feats = extract_features(&audio, cfg)?;
                variants.push(frame_clip(
                    &feats,
                    &scaled,
                    &classes,
                    cfg.win_frames,
                    cfg.shift_frames,
                    id,
                )?);
            }
            out.push(BaseClip {
                name: name.clone(),
                variants,
            });
        }
        Ok(Corpus { classes, clips: out })
    }

    pub fn window_count(&self) -> usize {
        self.clips.iter().flat_map(|c| &c.variants).map(Vec::len).sum()
    }
}

/// Reads every `<name>.wav` with a sibling `<name>.csv` under `dir`, sorted
/// by file name.
pub fn load_base_corpus<T: Real>(dir: &Path, cfg: &RunConfig) -> Result<Corpus<T>> {
    let mut wavs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    let mut clips = Vec::new();
    for wav in wavs {
        let csv = wav.with_extension("csv");
        if !csv.exists() {
            continue;
        }
        let name = wav.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        clips.push((name, read_wav(&wav)?, read_annotations(&csv)?));
    }
    if clips.is_empty() {
        return Err(Error::Validation(format!(
            "no annotated wav files in {}",
            dir.display()
        )));
    }
    Corpus::build(&clips, cfg)
}
