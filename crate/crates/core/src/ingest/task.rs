use super::annotations::AnnotationEvent;
use super::wav::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SHOTS: usize = 5;

/// One few-shot task: the first five POS events are the support, the gaps
/// between them are NEG, everything after the fifth POS is the query.
#[derive(Clone, Debug)]
pub struct SupportTask<T> {
    pub clip: AudioClip<T>,
    pub pos_events: Vec<AnnotationEvent>,
    pub neg_intervals: Vec<AnnotationEvent>,
    pub query_start_s: f64,
}

impl<T: Real> SupportTask<T> {
    pub fn query_end_s(&self) -> f64 {
        self.clip.duration_s()
    }
}

/// Builds the support set from the POS events of `events`. Other labels are
/// ignored.
pub fn make_support_task<T: Real>(clip: AudioClip<T>, events: &[AnnotationEvent]) -> Result<SupportTask<T>> {
    let mut pos: Vec<AnnotationEvent> = events.iter().filter(|e| e.label == "POS").cloned().collect();
    if pos.len() < SHOTS {
        return Err(Error::Task(format!("need {SHOTS} POS events, found {}", pos.len())));
    }
    pos.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    pos.truncate(SHOTS);
    let query_start_s = pos[SHOTS - 1].offset_s;
    let mut neg = Vec::new();
    let mut cursor = 0.0f64;
    for p in &pos {
        if p.onset_s > cursor {
            neg.push(AnnotationEvent::new(cursor, p.onset_s, "NEG")?);
        }
        cursor = cursor.max(p.offset_s);
    }
    Ok(SupportTask {
        clip,
        pos_events: pos,
        neg_intervals: neg,
        query_start_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> AudioClip<f64> {
        AudioClip::new(vec![0.0; 100], 10).unwrap()
    }

    fn pos(a: f64, b: f64) -> AnnotationEvent {
        AnnotationEvent::new(a, b, "POS").unwrap()
    }

    #[test]
    fn gap_construction() {
        let ev: Vec<_> = (0..5)
            .map(|i| pos(2.0 * i as f64 + 1.0, 2.0 * i as f64 + 2.0))
            .collect();
        let t = make_support_task(clip(), &ev).unwrap();
        assert_eq!(t.query_start_s, 10.0);
        let gaps: Vec<(f64, f64)> = t.neg_intervals.iter().map(|e| (e.onset_s, e.offset_s)).collect();
        assert_eq!(gaps, vec![(0.0, 1.0), (2.0, 3.0), (4.0, 5.0), (6.0, 7.0), (8.0, 9.0)]);
    }

    #[test]
    fn four_pos_is_error() {
        let ev: Vec<_> = (0..4).map(|i| pos(i as f64, i as f64 + 0.5)).collect();
        assert!(matches!(make_support_task(clip(), &ev), Err(Error::Task(_))));
    }

    #[test]
    fn abutting_events_leave_no_gap() {
        let ev = vec![
            pos(0.0, 1.0),
            pos(1.0, 2.0),
            pos(2.0, 3.0),
            pos(4.0, 5.0),
            pos(5.0, 6.0),
            pos(8.0, 9.0),
        ];
        let t = make_support_task(clip(), &ev).unwrap();
        assert_eq!(t.neg_intervals.len(), 1);
        assert_eq!(t.query_start_s, 6.0);
    }

    #[test]
    fn unsorted_input_and_extra_labels() {
        let mut ev: Vec<_> = (0..7)
            .rev()
            .map(|i| pos(3.0 * i as f64 + 0.5, 3.0 * i as f64 + 1.0))
            .collect();
        ev.push(AnnotationEvent::new(0.0, 0.2, "UNK").unwrap());
        let t = make_support_task(clip(), &ev).unwrap();
        assert_eq!(t.pos_events[0].onset_s, 0.5);
        assert_eq!(t.query_start_s, 13.0);
    }

    #[test]
    fn negs_cover_support_region() {
        let ev = vec![
            pos(0.3, 0.9),
            pos(1.4, 2.0),
            pos(2.0, 2.5),
            pos(3.1, 3.3),
            pos(4.0, 4.2),
        ];
        let t = make_support_task(clip(), &ev).unwrap();
        let mut covered: f64 = t.neg_intervals.iter().map(|e| e.duration_s()).sum();
        covered += t.pos_events.iter().map(|e| e.duration_s()).sum::<f64>();
        assert!((covered - t.query_start_s).abs() < 1e-12);
        for n in &t.neg_intervals {
            for p in &t.pos_events {
                assert!(n.offset_s <= p.onset_s || n.onset_s >= p.offset_s);
            }
        }
    }
}
