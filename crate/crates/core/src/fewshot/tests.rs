use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;

const SPANS: [(usize, usize); 5] = [(10, 16), (30, 38), (50, 55), (70, 78), (90, 96)];
const QUERY_POS: [(usize, usize); 3] = [(120, 126), (150, 158), (180, 185)];

fn tiny_cfg() -> RunConfig {
    RunConfig {
        mel_bands: 16,
        win_frames: 32,
        shift_frames: 16,
        channels: 4,
        emb_dim: 8,
        heads: 2,
        ffn_dim: 16,
        support_windows: 8,
        finetune_iters: 30,
        finetune_batch: 2,
        aug_start_iter: 5,
        aug_zones: 3,
        aug_min_zone: 4,
        pseudo_iters: 3,
        sfbc_iters: 10,
        speed_factors: vec![1.0],
        ..RunConfig::default()
    }
}

fn tiny_model(seed: u64) -> Model<f64> {
    let mc = ModelConfig::from_run(&tiny_cfg(), 3);
    Model::new(mc, vec!["background".into(), "a".into(), "b".into()], seed).unwrap()
}

fn tiny_task() -> PreparedTask<f64> {
    let n = 200;
    let on = |t: usize| SPANS.iter().chain(&QUERY_POS).any(|&(a, b)| t >= a && t < b);
    let mut s = 17u64;
    let values = Array2::from_shape_fn((n, 16), |(t, b)| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let noise = 0.2 * ((s >> 11) as f64 / (1u64 << 53) as f64);
        noise + if on(t) && b < 8 { 1.0 } else { 0.0 }
    });
    let shots = SPANS
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| Shot {
            variant: 0,
            index: i,
            frames: values.slice(ndarray::s![a..b, ..]).to_owned(),
        })
        .collect();
    let mut gaps = Vec::new();
    let mut cursor = 0;
    for (g, &(a, b)) in SPANS.iter().enumerate() {
        gaps.push(NegSnippet {
            origin: NegOrigin::Annotated { variant: 0, gap: g },
            frames: values.slice(ndarray::s![cursor..a, ..]).to_owned(),
        });
        cursor = b;
    }
    PreparedTask {
        name: "tiny".into(),
        features: FrameFeatures {
            values,
            frame_period_s: 0.01,
        },
        shots,
        gaps,
        shot_spans: SPANS.to_vec(),
        query_start_s: 0.96,
        query_start_frame: 96,
    }
}

#[test]
fn pos_center_examples() {
    let v = vec![0.6, 0.8];
    assert_eq!(pos_center(&vec![v.clone(); 5]).unwrap(), v);
    let c = pos_center(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_abs_diff_eq!(c[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
    assert_abs_diff_eq!(c[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-8);
    assert!(matches!(
        pos_center(&[vec![1.0, 0.0], vec![-1.0, 0.0]]),
        Err(Error::Degenerate(_))
    ));
    assert!(pos_center(&[]).is_err());
}

#[test]
fn similarity_examples() {
    let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-2.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let (sims, max) = query_similarity(&emb, &[1.0, 0.0]).unwrap();
    assert_eq!(sims, vec![1.0, 0.0, -1.0, 0.0]);
    assert_eq!(max, 1.0);
    let c = l2_normalize(&[1.0, 1.0]).unwrap();
    let (sims, _) = query_similarity(&emb, &c).unwrap();
    assert_abs_diff_eq!(sims[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    assert!(query_similarity(&emb, &[1.0]).is_err());
}

#[test]
fn negative_selection_examples() {
    assert_eq!(reconstruct_negatives(&[0.9, 0.1, 0.5], 1), vec![1]);
    assert_eq!(reconstruct_negatives(&[0.9, 0.1, 0.5], 5), vec![1, 2, 0]);
    assert_eq!(reconstruct_negatives(&[0.3, 0.2, 0.2, 0.3], 2), vec![1, 2]);
    assert_eq!(reconstruct_negatives(&[], 2), Vec::<usize>::new());
    assert_eq!(neg_quota(20, 0.2, 2), 4);
    assert_eq!(neg_quota(3, 0.2, 2), 2);
    assert_eq!(neg_quota(1, 0.2, 2), 1);
}

#[test]
fn aug_ramp_and_identity() {
    let spec = AugSpec {
        zones: 6,
        db_low: -6.0,
        db_high: 8.0,
        min_zone: 48,
    };
    let g = zone_gains(&[3], &[0.0, 1.0], &spec);
    for (a, b) in g.iter().zip([0.50119, 1.12202, 2.51189]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-5);
    }
    let flat = zone_gains(&[100, 200, 131], &[6.0 / 14.0; 4], &spec);
    assert!(flat.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert_eq!(flat.len(), 431);
}

#[test]
fn aug_gain_bounds_and_uniform_scaling() {
    let spec = AugSpec {
        zones: 6,
        db_low: -6.0,
        db_high: 8.0,
        min_zone: 48,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_fn(
        (431, 8),
        |(t, b)| if t % 7 == 0 { 0.0 } else { 1.0 + (t * b) as f64 * 1e-3 },
    );
    for _ in 0..20 {
        let y = time_filter_aug(&x, &spec, &mut rng);
        for t in 0..431 {
            for b in 0..8 {
                if x[[t, b]] == 0.0 {
                    assert_eq!(y[[t, b]], 0.0);
                } else {
                    let g = y[[t, b]] / x[[t, b]];
                    assert!((0.501187..=2.511887).contains(&g), "gain {g}");
                    // one gain per frame
                    assert_abs_diff_eq!(g, y[[t, 1]] / x[[t, 1]], epsilon = 1e-12);
                }
            }
        }
    }
    let scaled = apply_gains(&x, &zone_gains(&[200, 231], &[0.25, 0.25, 0.25], &spec));
    let ratio = scaled[[1, 1]] / x[[1, 1]];
    for t in (1..431).filter(|t| t % 7 != 0) {
        assert_abs_diff_eq!(scaled[[t, 3]] / x[[t, 3]], ratio, epsilon = 1e-12);
    }
    let short = Array2::from_elem((40, 4), 1.0);
    assert_eq!(time_filter_aug(&short, &spec, &mut rng), short);
    assert_eq!(spec.zone_count(431), 6);
    assert_eq!(spec.zone_count(200), 4);
}

#[test]
fn supports_are_deterministic_with_one_pos_run() {
    let task = tiny_task();
    let a = build_supports(&task.shots, &task.gaps, 16, 32, 9).unwrap();
    let b = build_supports(&task.shots, &task.gaps, 16, 32, 9).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.window, y.window);
    }
    for w in &a {
        let labels = &w.window.sed_labels;
        let first = labels.iter().position(|&l| l == 1).unwrap();
        let last = labels.iter().rposition(|&l| l == 1).unwrap();
        assert!(labels[first..=last].iter().all(|&l| l == 1));
        assert_eq!((first, last + 1 - first), (w.pos_start, w.pos_len));
        let shot = &task.shots[w.shot].frames;
        for t in 0..w.pos_len {
            assert_eq!(w.window.features.row(w.pos_start + t), shot.row(t));
        }
        let mut covered = [false; 32];
        for p in &w.pieces {
            let src = &task.gaps[p.snippet].frames;
            for k in 0..p.len {
                assert_eq!(w.window.features.row(p.dst_start + k), src.row(p.src_start + k));
                covered[p.dst_start + k] = true;
            }
        }
        for t in 0..32 {
            assert_eq!(covered[t], labels[t] == 0);
        }
    }
}

#[test]
fn long_shots_are_cropped_and_counts_exact() {
    let frames = Array2::from_elem((50, 4), 1.0);
    let neg = NegSnippet {
        origin: NegOrigin::Query { window: 0 },
        frames: Array2::zeros((10, 4)),
    };
    let shot = |len| Shot {
        variant: 0,
        index: 0,
        frames: Array2::from_elem((len, 4), 1.0),
    };
    let w = build_supports(
        &[Shot {
            variant: 0,
            index: 0,
            frames,
        }],
        std::slice::from_ref(&neg),
        3,
        431,
        1,
    )
    .unwrap();
    assert!(w.iter().all(|w| w.window.sed_labels.iter().sum::<usize>() == 50));
    let w = build_supports(&[shot(40)], std::slice::from_ref(&neg), 2, 32, 1).unwrap();
    assert!(w.iter().all(|w| w.window.sed_labels.iter().all(|&l| l == 1)));
    assert!(build_supports::<f64>(&[], &[neg], 2, 32, 1).is_err());
    assert!(build_supports(&[shot(4)], &[], 2, 32, 1).is_err());
}

#[test]
fn fusion_and_overlap_average() {
    assert_eq!(fuse_branches(1.0, 1.0), 1.0);
    assert_abs_diff_eq!(fuse_branches(0.8, 0.6), 0.7, epsilon = 1e-15);
    let avg = overlap_average(&[(0, vec![0.4, 0.4]), (1, vec![0.8, 0.2])], 4);
    assert_abs_diff_eq!(avg[1], 0.6, epsilon = 1e-15);
    assert_eq!(avg[0], 0.4);
    assert_eq!(avg[2], 0.2);
    assert_eq!(avg[3], 0.0);
}

#[test]
fn frame_span_and_query_windows() {
    assert_eq!(frame_span(0.0, 1.0, 0.01161, 1000), (0, 86));
    assert_eq!(frame_span(0.5, 0.501, 0.01, 1000), (50, 51));
    let q = query_windows(100, 10, 32, 16);
    assert_eq!(q.first().unwrap().start, 10);
    assert_eq!(q.last().unwrap().start + q.last().unwrap().valid, 100);
    assert!(q.iter().all(|w| w.valid <= 32));
    assert_eq!(
        query_windows(20, 10, 32, 16),
        vec![QueryWindow { start: 10, valid: 10 }]
    );
}

#[test]
fn shot_self_similarity_is_one() {
    let model = tiny_model(1);
    let task = tiny_task();
    let shots = shot_embeddings(&model, &task).unwrap();
    for s in &shots {
        let c = pos_center(std::slice::from_ref(s)).unwrap();
        let t = Tensor::new([1, s.len()], s.clone()).unwrap();
        let (sims, _) = query_similarity(&t, &c).unwrap();
        assert!((sims[0] - 1.0).abs() < 1e-9);
    }
}

fn supports_of(task: &PreparedTask<f64>, cfg: &RunConfig) -> ReconstructedSupports<f64> {
    ReconstructedSupports {
        support1: build_supports(&task.shots, &task.gaps, cfg.support_windows, cfg.win_frames, 3).unwrap(),
        support2: build_supports(&task.shots, &task.gaps, cfg.support_windows, cfg.win_frames, 4).unwrap(),
    }
}

#[test]
fn sed_finetune_grafts_freezes_and_learns() {
    let cfg = tiny_cfg();
    let task = tiny_task();
    let sup = supports_of(&task, &cfg);
    let pre = tiny_model(2);
    let mut model = pre.clone();
    let center = pos_center(&shot_embeddings(&model, &task).unwrap()).unwrap();
    let windows: Vec<CachedWindow<'_, f64>> = sup
        .support1
        .iter()
        .enumerate()
        .map(|(i, w)| CachedWindow::new(CacheKey::Support1(i), w))
        .collect();
    let mut cache = StemCache::new();

    let mut grafted = model.clone();
    graft_background_row(&mut grafted, &center).unwrap();
    assert_eq!(grafted.param("decoder_sed.weight").unwrap().row(0), &center[..]);
    let before = model.param("decoder_sed.weight").unwrap();
    let after = grafted.param("decoder_sed.weight").unwrap();
    for r in 1..3 {
        assert_eq!(before.row(r), after.row(r));
    }

    init_binary_decoder(&mut model, &mut cache, &windows, &center).unwrap();
    let report = finetune_sed(&mut model, &mut cache, &windows, None, &center, &cfg, 5).unwrap();
    let head: f64 = report.bin_loss[..5].iter().sum();
    let tail: f64 = report.bin_loss[25..].iter().sum();
    assert!(tail < head, "{:?}", report.bin_loss);
    for name in ["block1.conv.weight", "block2.bn.gamma", "embed.weight", "tf.attn.wq"] {
        assert_eq!(model.param(name).unwrap(), pre.param(name).unwrap(), "{name}");
    }
    assert_ne!(
        model.param("block3.conv.weight").unwrap(),
        pre.param("block3.conv.weight").unwrap()
    );

    let cfg1 = RunConfig {
        graft: crate::ingest::GraftMode::BinaryClassOne,
        ..cfg
    };
    let mut m1 = pre.clone();
    let mut cache1 = StemCache::new();
    finetune_sed(&mut m1, &mut cache1, &windows, None, &center, &cfg1, 5).unwrap();
    assert_eq!(
        m1.param("decoder_sed.weight").unwrap().row(0),
        m1.param("decoder_bin.weight").unwrap().row(1)
    );
}

#[test]
fn refinement_cycles_and_skips() {
    let task = tiny_task();
    let model = tiny_model(3);
    let mut cache = StemCache::new();
    let none = RunConfig {
        pseudo_cycles: 0,
        ..tiny_cfg()
    };
    let mut m = model.clone();
    let r = pseudo_label_refine(&mut m, &mut cache, &task, &none, 1).unwrap();
    assert_eq!(r.cycles_run, 0);
    assert_eq!(m, model);

    let unsure = RunConfig {
        pseudo_pos: 1.1,
        pseudo_neg: -0.1,
        ..tiny_cfg()
    };
    let r = pseudo_label_refine(&mut m, &mut cache, &task, &unsure, 1).unwrap();
    assert_eq!((r.cycles_run, r.cycles_skipped), (0, 3));
    assert_eq!(m, model);

    let all = RunConfig {
        pseudo_pos: 0.5,
        pseudo_neg: 0.5,
        ..tiny_cfg()
    };
    let r = pseudo_label_refine(&mut m, &mut cache, &task, &all, 1).unwrap();
    assert_eq!(r.cycles_run, 3);
    assert_ne!(
        m.param("decoder_bin.weight").unwrap(),
        model.param("decoder_bin.weight").unwrap()
    );
    assert_eq!(
        m.param("block2.conv.weight").unwrap(),
        model.param("block2.conv.weight").unwrap()
    );
}

#[test]
fn sfbc_finetune_trains_only_its_decoder() {
    let cfg = tiny_cfg();
    let task = tiny_task();
    let sup = supports_of(&task, &cfg);
    let pre = tiny_model(4);
    let mut model = pre.clone();
    let mut cache = StemCache::new();
    let c = sfbc_center(&model, &sup.support1).unwrap();
    let hold = sfbc_holdout_len(sup.support2.len());
    let r = finetune_sfbc(
        &mut model,
        &mut cache,
        &c,
        &sup.support2,
        sup.support2.len() - hold,
        &cfg,
        2,
    )
    .unwrap();
    assert_eq!(r.loss.len(), 10);
    assert!(r.holdout_accuracy.is_some());
    for (name, t) in &pre.params {
        if name.starts_with("decoder_sfbc.") {
            assert_ne!(t, &model.params[name], "{name}");
        } else {
            assert_eq!(t, &model.params[name], "{name}");
        }
    }
    assert!(sfbc_center(&model, &[]).is_err());
}

#[test]
fn adapted_task_round_trips_bit_exactly() {
    let cfg = RunConfig {
        finetune_iters: 6,
        pseudo_cycles: 1,
        ..tiny_cfg()
    };
    let task = tiny_task();
    let pre = tiny_model(5);
    let out = adapt_task(&pre, &task, None, &cfg, AdaptOptions::default(), 8).unwrap();
    assert_eq!(out.probs.start_frame, 96);
    assert_eq!(out.probs.probs.len(), 104);
    assert!(out.probs.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    let bytes = out.task.to_checkpoint().unwrap().to_bytes();
    let back = AdaptedTask::<f64>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.meta, out.task.meta);
    let again = detect(
        &back.model,
        &task,
        back.sfbc_center.as_deref(),
        &mut StemCache::new(),
        &cfg,
    )
    .unwrap();
    let bits = |p: &QueryProbs| p.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&again), bits(&out.probs));

    let again = adapt_task(&pre, &task, None, &cfg, AdaptOptions::default(), 8).unwrap();
    assert_eq!(bits(&again.probs), bits(&out.probs));
}
