use super::*;
use crate::autodiff::softmax_in_place;

fn small(n_classes: usize) -> Model<f64> {
    let cfg = ModelConfig {
        mel_bands: 32,
        channels: 4,
        emb_dim: 8,
        heads: 2,
        ffn_dim: 16,
        n_classes,
        use_transformer: true,
        win_frames: 431,
    };
    let classes = (0..n_classes).map(|i| format!("c{i}")).collect();
    Model::new(cfg, classes, 3).unwrap()
}

fn window(seed: u64, bands: usize) -> Array2<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Array2::from_shape_fn((431, bands), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

#[test]
fn embedding_shape_and_determinism() {
    let m = small(3);
    let w = window(1, 32);
    let e = m.embed(&w).unwrap();
    assert_eq!(e.shape(), &[108, 8]);
    assert_eq!(e, m.embed(&w).unwrap());
    let mut tape = Tape::new();
    assert!(m.input(&mut tape, &Array2::zeros((430, 32))).is_err());
}

#[test]
fn zero_input_gives_zero_embedding() {
    let m = small(3);
    let e = m.embed(&Array2::zeros((431, 32))).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn repeat_upsample_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let up = repeat_upsample(&x, 2, 4).unwrap();
    assert_eq!(up.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    let up = repeat_upsample(&x, 2, 3).unwrap();
    assert_eq!(up.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
    assert!(repeat_upsample(&x, 2, 5).is_err());
    let big = Tensor::<f64>::zeros([108, 128]);
    assert_eq!(repeat_upsample(&big, 4, 431).unwrap().shape(), &[431, 128]);
}

#[test]
fn tc_vector_examples() {
    let w = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let out = tc_vector(&w, &[1, 0, 1], 1);
    assert_eq!(
        out.iter().copied().collect::<Vec<_>>(),
        vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]
    );
    assert_eq!(tc_vector(&out, &[1, 0, 1], 1), out);
    assert_eq!(tc_vector(&w, &[2, 2, 2], 2), w);
    assert!(tc_vector(&w, &[0, 0, 0], 2).iter().all(|&v| v == 0.0));
}

fn labelled(classes: &[usize]) -> WindowBatch<f64> {
    WindowBatch {
        features: Array2::zeros((4, 1)),
        sed_labels: classes.to_vec(),
        sfbc_labels: classes.iter().map(|&c| u8::from(c != 0)).collect(),
        train_mask: vec![true; classes.len()],
        window_start_frame: 0,
        valid_frames: classes.len(),
        source_id: 0,
    }
}

#[test]
fn tc_window_selection() {
    let ws: Vec<_> = (0..8)
        .map(|i| labelled(if i == 2 || i == 7 { &[0, 5] } else { &[0, 0] }))
        .collect();
    assert_eq!(select_tc_window(&ws, 5, 7).unwrap(), 2);
    let ws: Vec<_> = (0..5).map(|i| labelled(if i == 3 { &[5] } else { &[0] })).collect();
    assert_eq!(select_tc_window(&ws, 5, 3).unwrap(), 3);
    let ws: Vec<_> = (0..7)
        .map(|i| labelled(if [1, 4, 6].contains(&i) { &[5] } else { &[0] }))
        .collect();
    assert_eq!(select_tc_window(&ws, 5, 6).unwrap(), 4);
    assert!(matches!(select_tc_window(&ws, 9, 6), Err(Error::Selection(_))));
}

fn sfbc_probs(m: &Model<f64>, w: &Array2<f64>, tc: &Array2<f64>, labels: &[usize], target: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, |_| false);
    let mut stats = BnStats::default();
    let x = m.input(&mut tape, w).unwrap();
    let emb = m.backbone(&mut tape, &b, x, BnMode::Train, &mut stats).unwrap();
    let tcx = m.input(&mut tape, &tc_vector(tc, labels, target)).unwrap();
    let tc_emb = m.backbone(&mut tape, &b, tcx, BnMode::Train, &mut stats).unwrap();
    let mask: Vec<bool> = labels.iter().map(|&l| l == target).collect();
    let center = m.pos_center(&mut tape, tc_emb, &reduce_mask(&mask, 108)).unwrap();
    let logits = m.sfbc_logits(&mut tape, &b, emb, center).unwrap();
    tape.value(logits).clone()
}

#[test]
fn sfbc_ignores_non_target_frames_of_tc_window() {
    let m = small(3);
    let w = window(5, 32);
    let tc = window(6, 32);
    let labels: Vec<usize> = (0..431)
        .map(|t| {
            if (100..180).contains(&t) {
                2
            } else if t < 40 {
                1
            } else {
                0
            }
        })
        .collect();
    let a = sfbc_probs(&m, &w, &tc, &labels, 2);
    assert_eq!(a.shape(), &[431, 2]);
    let mut tc2 = window(99, 32);
    for t in 100..180 {
        tc2.row_mut(t).assign(&tc.row(t));
    }
    let b = sfbc_probs(&m, &w, &tc2, &labels, 2);
    assert_eq!(a, b);
}

#[test]
fn single_pos_frame_center_is_that_row() {
    let m = small(3);
    let mut tape = Tape::new();
    let emb = tape.constant(Tensor::new([108, 8], (0..864).map(|v| v as f64).collect()).unwrap());
    let mut mask = vec![false; 108];
    mask[17] = true;
    let c = m.pos_center(&mut tape, emb, &mask).unwrap();
    assert_eq!(tape.value(c).data(), tape.value(emb).row(17));
    assert_eq!(
        reduce_mask(&[false, false, false, false, false, true], 2),
        vec![false, true]
    );
}

#[test]
fn sed_head_repeats_and_is_uniform_at_zero() {
    let mut m = small(5);
    for v in m.param_mut("decoder_sed.bias").unwrap().data_mut() {
        *v = 0.0;
    }
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, |_| false);
    let zero = tape.constant(Tensor::zeros([108, 8]));
    let z = m.sed_logits(&mut tape, &b, zero).unwrap();
    let mut row = tape.value(z).row(0).to_vec();
    softmax_in_place(&mut row);
    assert!(row.iter().all(|&p| (p - 0.2).abs() < 1e-15));

    let x = m.input(&mut tape, &window(2, 32)).unwrap();
    let emb = m
        .backbone(&mut tape, &b, x, BnMode::Eval, &mut BnStats::default())
        .unwrap();
    let z = m.sed_logits(&mut tape, &b, emb).unwrap();
    let v = tape.value(z);
    assert_eq!(v.shape(), &[431, 5]);
    assert!((1..4).all(|t| v.row(t) == v.row(0)));
    assert_ne!(v.row(4), v.row(0));
    for t in 0..431 {
        let mut r = v.row(t).to_vec();
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn both_branches_reach_the_backbone() {
    let m = small(3);
    let w = window(8, 32);
    let labels: Vec<usize> = (0..431).map(|t| usize::from((50..200).contains(&t))).collect();
    let mask = vec![true; 431];
    for branch in ["sed", "sfbc"] {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| true);
        let mut stats = BnStats::default();
        let x = m.input(&mut tape, &w).unwrap();
        let emb = m.backbone(&mut tape, &b, x, BnMode::Train, &mut stats).unwrap();
        let loss = if branch == "sed" {
            let z = m.sed_logits(&mut tape, &b, emb).unwrap();
            tape.masked_softmax_ce(z, &labels, &mask).unwrap()
        } else {
            let fg: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let c = m.pos_center(&mut tape, emb, &reduce_mask(&fg, 108)).unwrap();
            let z = m.sfbc_logits(&mut tape, &b, emb, c).unwrap();
            tape.masked_softmax_ce(z, &labels, &mask).unwrap()
        };
        let mut g = tape.backward(loss).unwrap();
        let grads = b.collect(&tape, &mut g);
        let conv = &grads["block1.conv.weight"];
        assert!(conv.max_abs() > 0.0, "{branch}");
        assert!(!stats.is_empty());
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut m = small(3);
    m.buffers["block2.bn.running_mean"].data_mut()[1] = 0.123;
    let ck = m.to_checkpoint(serde_json::json!({"seed": 4}));
    let back = crate::autodiff::Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let (m2, extra) = Model::<f64>::from_checkpoint(&back).unwrap();
    assert_eq!(m2, m);
    assert_eq!(extra["seed"], 4);
    let w = window(4, 32);
    assert_eq!(m.embed(&w).unwrap(), m2.embed(&w).unwrap());
}

#[test]
fn bad_configs_rejected() {
    let mut cfg = small(3).config;
    cfg.heads = 3;
    assert!(Model::<f64>::new(cfg.clone(), vec!["a".into(); 3], 0).is_err());
    cfg.heads = 2;
    assert!(Model::<f64>::new(cfg, vec!["a".into(); 2], 0).is_err());
}
