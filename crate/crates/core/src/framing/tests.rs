use super::*;
use proptest::prelude::*;

const PERIOD: f64 = 256.0 / 22050.0;

fn ev(on: f64, off: f64, label: &str) -> AnnotationEvent {
    AnnotationEvent::new(on, off, label.to_string()).unwrap()
}

fn feats(n: usize) -> FrameFeatures<f64> {
    FrameFeatures {
        values: Array2::from_shape_fn((n, 2), |(t, b)| (t * 2 + b) as f64),
        frame_period_s: PERIOD,
    }
}

#[test]
fn labels_follow_frame_centers() {
    let cm = ClassMap::new(&["a", "b"]).unwrap();
    let l = label_frames(200, PERIOD, &[ev(0.0, 1.0, "b")], &cm).unwrap();
    assert!(l[..86].iter().all(|&x| x == 2));
    assert!(l[86..].iter().all(|&x| x == 0));
    assert!(label_frames(50, PERIOD, &[], &cm).unwrap().iter().all(|&x| x == 0));
    let all = label_frames(50, PERIOD, &[ev(0.0, 10.0, "a")], &cm).unwrap();
    assert!(all.iter().all(|&x| x == 1));
    assert!(label_frames(5, PERIOD, &[ev(0.0, 1.0, "zzz")], &cm).is_err());
}

#[test]
fn later_onset_wins() {
    let cm = ClassMap::new(&["a", "b"]).unwrap();
    let l = label_frames(100, PERIOD, &[ev(0.5, 0.9, "b"), ev(0.0, 1.0, "a")], &cm).unwrap();
    let t = (0.7 / PERIOD) as usize;
    assert_eq!(l[t], 2);
    assert_eq!(l[5], 1);
}

#[test]
fn window_counts_and_padding() {
    let lab = |n| vec![0usize; n];
    assert_eq!(segment_windows(&feats(431), &lab(431), 431, 86, 0).unwrap().len(), 1);
    let w = segment_windows(&feats(517), &lab(517), 431, 86, 0).unwrap();
    assert_eq!(w.iter().map(|w| w.window_start_frame).collect::<Vec<_>>(), vec![0, 86]);
    let w = segment_windows(&feats(430), &lab(430), 431, 86, 0).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].valid_frames, 430);
    assert!(!w[0].train_mask[430] && w[0].train_mask[429]);
    assert_eq!(w[0].features.row(430), w[0].features.row(429));
    assert!(segment_windows(&feats(0), &lab(0), 431, 86, 0).is_err());
    assert!(segment_windows(&feats(10), &lab(10), 86, 86, 0).is_err());
}

#[test]
fn overlap_mask_example() {
    let mut labels = vec![0usize; 517];
    for l in &mut labels[400..441] {
        *l = 1;
    }
    let mut w = segment_windows(&feats(517), &labels, 431, 86, 0).unwrap();
    build_overlap_mask(&mut w);
    assert!((400..431).all(|f| w[0].train_mask[f]));
    assert!((400..431).all(|f| !w[1].train_mask[f - 86]));
    assert!((431..441).all(|f| w[1].train_mask[f - 86]));
    // background stays trained in every window
    assert!(w[1].train_mask[0] && w[0].train_mask[0]);
}

#[test]
fn no_events_keeps_full_mask() {
    let mut w = segment_windows(&feats(517), &[0; 517], 431, 86, 0).unwrap();
    build_overlap_mask(&mut w);
    assert!(w.iter().all(|w| w.train_mask[..w.valid_frames].iter().all(|&m| m)));
}

fn window_with(pos: usize, len: usize) -> WindowBatch<f64> {
    let mut sed = vec![0usize; len];
    for s in &mut sed[..pos] {
        *s = 1;
    }
    WindowBatch {
        features: Array2::zeros((len, 1)),
        sfbc_labels: sed.iter().map(|&l| u8::from(l != 0)).collect(),
        sed_labels: sed,
        train_mask: vec![true; len],
        window_start_frame: 0,
        valid_frames: len,
        source_id: 0,
    }
}

#[test]
fn balancing_replicates_event_windows() {
    let mut ws = vec![window_with(50, 431)];
    ws.extend((0..9).map(|_| window_with(0, 431)));
    let order = balanced_sample_indices(&ws, 1).unwrap();
    assert_eq!(order.iter().filter(|&&i| i == 0).count(), 78);
    assert_eq!(order.len(), 78 + 9);
    assert_eq!(order, balanced_sample_indices(&ws, 1).unwrap());

    let even = vec![window_with(431, 431), window_with(0, 431)];
    let mut o = balanced_sample_indices(&even, 3).unwrap();
    o.sort();
    assert_eq!(o, vec![0, 1]);

    assert!(balanced_sample_indices(&[window_with(0, 10)], 0).is_err());
}

#[test]
fn class_map_reserves_background() {
    let cm = ClassMap::from_events(&[ev(0.0, 1.0, "y"), ev(1.0, 2.0, "x"), ev(2.0, 3.0, "y")]).unwrap();
    assert_eq!(cm.names(), &["background", "x", "y"]);
    assert_eq!(cm.index("y").unwrap(), 2);
    assert!(ClassMap::new(&["background"]).is_err());
    assert!(ClassMap::new(&["a", "a"]).is_err());
}

proptest! {
    #[test]
    fn every_event_frame_trained_exactly_once(
        n in 1usize..1400,
        spans in proptest::collection::vec((0.0f64..16.0, 0.05f64..3.0), 0..6),
    ) {
        let cm = ClassMap::new(&["a"]).unwrap();
        let events: Vec<_> = spans.iter().map(|&(o, d)| ev(o, o + d, "a")).collect();
        let w = frame_clip(&feats(n), &events, &cm, 431, 86, 0).unwrap();
        let labels = label_frames(n, PERIOD, &events, &cm).unwrap();
        let mut covered = vec![0usize; n];
        let mut trained = vec![0usize; n];
        for win in &w {
            for i in 0..win.valid_frames {
                let f = win.window_start_frame + i;
                covered[f] += 1;
                trained[f] += usize::from(win.train_mask[i]);
            }
        }
        for f in 0..n {
            prop_assert!(covered[f] >= 1);
            if labels[f] != 0 {
                prop_assert_eq!(trained[f], 1);
            }
        }
    }

    #[test]
    fn extending_offset_never_unlabels(on in 0.0f64..3.0, d in 0.01f64..2.0, extra in 0.0f64..2.0) {
        let cm = ClassMap::new(&["a"]).unwrap();
        let a = label_frames(600, PERIOD, &[ev(on, on + d, "a")], &cm).unwrap();
        let b = label_frames(600, PERIOD, &[ev(on, on + d + extra, "a")], &cm).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(&x, &y)| x == 0 || y != 0));
    }
}
