//! Deterministic synthetic few-shot corpus: tone bursts and chirps over pink
//! noise, with base-class files carrying full annotations and novel-class
//! task files carrying POS annotations.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotations::{write_annotations, AnnotationEvent};
use super::wav::{quantize_i16, write_wav, AudioClip};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Sinusoid with a weaker second harmonic.
    Tone,
    /// Linear sweep across `sweep_hz` centered on `center_hz`.
    Chirp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: SignalKind,
    pub center_hz: f64,
    pub sweep_hz: f64,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
}

impl ClassSpec {
    pub fn tone(name: &str, center_hz: f64, min_dur_s: f64, max_dur_s: f64) -> Self {
        ClassSpec {
            name: name.into(),
            kind: SignalKind::Tone,
            center_hz,
            sweep_hz: 0.0,
            min_dur_s,
            max_dur_s,
        }
    }

    pub fn chirp(name: &str, center_hz: f64, sweep_hz: f64, min_dur_s: f64, max_dur_s: f64) -> Self {
        ClassSpec {
            name: name.into(),
            kind: SignalKind::Chirp,
            center_hz,
            sweep_hz,
            min_dur_s,
            max_dur_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub base_classes: Vec<ClassSpec>,
    pub novel_classes: Vec<ClassSpec>,
    pub base_clip_s: f64,
    /// Events of the file's own class in each base file.
    pub base_events_per_file: usize,
    /// Events drawn from the other base classes in each base file.
    pub base_cross_events: usize,
    pub novel_clip_s: f64,
    pub novel_pos_events: usize,
    /// Unannotated base-class events mixed into each novel task file.
    pub novel_distractors: usize,
    /// Signal-to-noise ratio in dB; `None` disables the noise floor.
    pub snr_db: Option<f64>,
    pub amplitude: f64,
    pub min_gap_s: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sample_rate: 22050,
            base_classes: vec![
                ClassSpec::tone("tone_900", 900.0, 0.25, 0.7),
                ClassSpec::chirp("chirp_2200", 2200.0, 800.0, 0.25, 0.7),
                ClassSpec::tone("tone_3800", 3800.0, 0.25, 0.7),
                ClassSpec::chirp("chirp_6000", 6000.0, 1500.0, 0.25, 0.7),
            ],
            novel_classes: vec![
                ClassSpec::tone("tone_1500", 1500.0, 0.2, 0.5),
                ClassSpec::chirp("chirp_4800", 4800.0, -1000.0, 0.2, 0.5),
            ],
            base_clip_s: 60.0,
            base_events_per_file: 20,
            base_cross_events: 8,
            novel_clip_s: 90.0,
            novel_pos_events: 12,
            novel_distractors: 8,
            snr_db: Some(10.0),
            amplitude: 0.3,
            min_gap_s: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Clone, Debug)]
pub struct SynthFile {
    pub name: String,
    pub split: Split,
    pub clip: AudioClip<f64>,
    /// Annotated events: class names for base files, `POS` for novel files.
    pub events: Vec<AnnotationEvent>,
}

struct Placed<'a> {
    class: &'a ClassSpec,
    onset_s: f64,
    dur_s: f64,
    annotate_as: Option<String>,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.sample_rate == 0 {
            return fail("sample rate must be positive".into());
        }
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return fail("need at least one base and one novel class".into());
        }
        for n in &self.novel_classes {
            if self.base_classes.iter().any(|b| b.name == n.name) {
                return fail(format!("novel class {} is also a base class", n.name));
            }
        }
        for c in self.base_classes.iter().chain(&self.novel_classes) {
            let nyq = self.sample_rate as f64 / 2.0;
            let top = match c.kind {
                SignalKind::Tone => 2.0 * c.center_hz,
                SignalKind::Chirp => c.center_hz + c.sweep_hz.abs() / 2.0,
            };
            if c.center_hz - c.sweep_hz.abs() / 2.0 <= 0.0 || top >= nyq {
                return fail(format!("class {} does not fit below Nyquist", c.name));
            }
            if !(c.min_dur_s > 0.0 && c.min_dur_s <= c.max_dur_s) {
                return fail(format!("class {} has a bad duration range", c.name));
            }
        }
        if self.novel_pos_events < 10 {
            return fail("novel files need at least 10 POS events".into());
        }
        Ok(())
    }
}

/// Places events in random order with random gaps of at least `min_gap_s`.
fn place<'a>(
    rng: &mut ChaCha8Rng,
    items: Vec<(&'a ClassSpec, Option<String>)>,
    clip_s: f64,
    min_gap_s: f64,
    what: &str,
) -> Result<Vec<Placed<'a>>> {
    let mut items = items;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    let durs: Vec<f64> = items
        .iter()
        .map(|(c, _)| rng.random_range(c.min_dur_s..=c.max_dur_s))
        .collect();
    let needed: f64 = durs.iter().sum::<f64>() + min_gap_s * (items.len() + 1) as f64;
    if needed > clip_s {
        return Err(Error::Generation(format!(
            "{what}: {} events need {needed:.2} s but the clip is {clip_s:.2} s",
            items.len()
        )));
    }
    let slack = clip_s - needed;
    let weights: Vec<f64> = (0..=items.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(items.len());
    for (k, ((class, ann), dur)) in items.into_iter().zip(durs).enumerate() {
        t += min_gap_s + slack * weights[k] / wsum;
        out.push(Placed {
            class,
            onset_s: t,
            dur_s: dur,
            annotate_as: ann,
        });
        t += dur;
    }
    Ok(out)
}

fn render_event(buf: &mut [f64], sr: f64, ev: &Placed, amp: f64, phase: f64) {
    let start = (ev.onset_s * sr).round() as usize;
    let n = (ev.dur_s * sr).round() as usize;
    let ramp = ((0.01 * sr) as usize).clamp(1, n / 2 + 1);
    let c = ev.class;
    for i in 0..n {
        let Some(slot) = buf.get_mut(start + i) else { break };
        let t = i as f64 / sr;
        let env = if i < ramp {
            0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
        } else if i >= n - ramp {
            0.5 - 0.5 * (PI * (n - 1 - i) as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        let x = match c.kind {
            SignalKind::Tone => {
                let ph = 2.0 * PI * c.center_hz * t + phase;
                ph.sin() + 0.25 * (2.0 * ph).sin()
            }
            SignalKind::Chirp => {
                let f0 = c.center_hz - c.sweep_hz / 2.0;
                let k = c.sweep_hz / ev.dur_s;
                (2.0 * PI * (f0 * t + 0.5 * k * t * t) + phase).sin()
            }
        };
        *slot += amp * env * x;
    }
}

/// Pink noise via Kellet's filter on uniform white noise, scaled to `rms`.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, rms: f64) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.random_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        out.push(b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362);
        b[6] = w * 0.115926;
    }
    let cur = (out.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
    if cur > 0.0 {
        for x in &mut out {
            *x *= rms / cur;
        }
    }
    out
}

fn render_file(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    name: String,
    split: Split,
    clip_s: f64,
    placed: Vec<Placed>,
) -> Result<SynthFile> {
    let sr = spec.sample_rate as f64;
    let n = (clip_s * sr).round() as usize;
    let mut buf = match spec.snr_db {
        Some(snr) => {
            let signal_rms = spec.amplitude / 2f64.sqrt();
            pink_noise(rng, n, signal_rms / 10f64.powf(snr / 20.0))
        }
        None => vec![0.0; n],
    };
    let mut events = Vec::new();
    for ev in &placed {
        let amp = spec.amplitude * rng.random_range(0.7..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        render_event(&mut buf, sr, ev, amp, phase);
        if let Some(label) = &ev.annotate_as {
            events.push(AnnotationEvent::new(ev.onset_s, ev.onset_s + ev.dur_s, label.clone())?);
        }
    }
    let samples = buf
        .into_iter()
        .map(|x| quantize_i16(x.clamp(-1.0, 1.0)) as f64 / 32768.0)
        .collect();
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(SynthFile {
        name,
        split,
        clip: AudioClip::new(samples, spec.sample_rate)?,
        events,
    })
}

/// Generates the corpus in memory. Samples already sit on the 16-bit grid,
/// so writing and re-reading the files reproduces them exactly.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthFile>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = Vec::new();
    for (i, class) in spec.base_classes.iter().enumerate() {
        let mut items: Vec<(&ClassSpec, Option<String>)> = (0..spec.base_events_per_file)
            .map(|_| (class, Some(class.name.clone())))
            .collect();
        let others: Vec<&ClassSpec> = spec.base_classes.iter().filter(|c| c.name != class.name).collect();
        for _ in 0..spec.base_cross_events {
            if others.is_empty() {
                break;
            }
            let o = others[rng.random_range(0..others.len())];
            items.push((o, Some(o.name.clone())));
        }
        let name = format!("base_{i:02}_{}", class.name);
        let placed = place(&mut rng, items, spec.base_clip_s, spec.min_gap_s, &name)?;
        files.push(render_file(
            &mut rng,
            spec,
            name,
            Split::Base,
            spec.base_clip_s,
            placed,
        )?);
    }
    for (j, class) in spec.novel_classes.iter().enumerate() {
        let mut items: Vec<(&ClassSpec, Option<String>)> = (0..spec.novel_pos_events)
            .map(|_| (class, Some("POS".to_string())))
            .collect();
        for _ in 0..spec.novel_distractors {
            let o = &spec.base_classes[rng.random_range(0..spec.base_classes.len())];
            items.push((o, None));
        }
        let name = format!("task_{j:02}_{}", class.name);
        let placed = place(&mut rng, items, spec.novel_clip_s, spec.min_gap_s, &name)?;
        files.push(render_file(
            &mut rng,
            spec,
            name,
            Split::Novel,
            spec.novel_clip_s,
            placed,
        )?);
    }
    Ok(files)
}

/// Generates the corpus and writes `base/*.wav|csv` and `novel/*.wav|csv`
/// under `out`.
pub fn synth_task_set(spec: &SynthSpec, seed: u64, out: &Path) -> Result<Vec<SynthFile>> {
    let files = generate(spec, seed)?;
    for f in &files {
        let dir = out.join(match f.split {
            Split::Base => "base",
            Split::Novel => "novel",
        });
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let wav_name = format!("{}.wav", f.name);
        write_wav(&dir.join(&wav_name), &f.clip)?;
        write_annotations(&dir.join(format!("{}.csv", f.name)), &wav_name, &f.events)?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_annotations, read_wav};

    fn small() -> SynthSpec {
        SynthSpec {
            base_clip_s: 20.0,
            base_events_per_file: 6,
            base_cross_events: 2,
            novel_clip_s: 30.0,
            novel_distractors: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_task_set(&small(), 11, a.path()).unwrap();
        synth_task_set(&small(), 11, b.path()).unwrap();
        for sub in ["base", "novel"] {
            for entry in fs::read_dir(a.path().join(sub)).unwrap() {
                let p = entry.unwrap().path();
                let q = b.path().join(sub).join(p.file_name().unwrap());
                assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
            }
        }
    }

    #[test]
    fn base_files_annotate_their_classes() {
        let d = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            base_clip_s: 60.0,
            ..small()
        };
        let files = synth_task_set(&spec, 3, d.path()).unwrap();
        let base: Vec<_> = files.iter().filter(|f| f.split == Split::Base).collect();
        assert_eq!(base.len(), 4);
        for f in base {
            let ev = read_annotations(&d.path().join("base").join(format!("{}.csv", f.name))).unwrap();
            assert_eq!(ev.len(), 8);
            let own = f.name.split_once('_').unwrap().1.split_once('_').unwrap().1;
            assert!(ev.iter().any(|e| e.label == own));
            let clip: AudioClip<f64> = read_wav(&d.path().join("base").join(format!("{}.wav", f.name))).unwrap();
            assert_eq!(clip, f.clip);
        }
        let novel: Vec<_> = files.iter().filter(|f| f.split == Split::Novel).collect();
        assert!(novel
            .iter()
            .all(|f| f.events.len() >= 10 && f.events.iter().all(|e| e.label == "POS")));
    }

    #[test]
    fn noiseless_gaps_are_silent() {
        let spec = SynthSpec {
            snr_db: None,
            ..small()
        };
        let files = generate(&spec, 5).unwrap();
        let f = files.iter().find(|f| f.split == Split::Novel).unwrap();
        let sr = spec.sample_rate as f64;
        let rms = |a: f64, b: f64| {
            let s = &f.clip.samples[(a * sr) as usize..(b * sr) as usize];
            (s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64).sqrt()
        };
        for e in &f.events {
            assert!(rms(e.onset_s + 0.02, e.offset_s - 0.02) > 0.0);
        }
        let silent = (0..f.clip.samples.len() / 2205)
            .map(|k| k as f64 * 0.1)
            .filter(|&a| rms(a, a + 0.1) == 0.0)
            .count();
        assert!(silent > 50);
    }

    #[test]
    fn infeasible_density_is_error() {
        let spec = SynthSpec {
            novel_clip_s: 3.0,
            ..small()
        };
        assert!(matches!(generate(&spec, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn overlapping_names_rejected() {
        let mut spec = small();
        spec.novel_classes[0].name = spec.base_classes[0].name.clone();
        assert!(generate(&spec, 1).is_err());
    }
}
