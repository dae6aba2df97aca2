use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::neuralnet::{grad_check, Tensor};
use crate::synth::{bank_texture, compose, render, three_phase_regions, two_phase_regions};

fn small(classes: usize) -> SegNetConfig {
    SegNetConfig {
        input_size: 32,
        base_channels: 4,
        classes,
        ..Default::default()
    }
}

#[test]
fn default_shape_and_budget() {
    let cfg = SegNetConfig::default();
    let net = build_segnet(&cfg, 0).unwrap();
    assert_eq!(net.output_shape(), &[3, 64, 64]);
    assert!(net.param_count() <= MAX_PARAMS, "{}", net.param_count());
    for ds in [4, 16] {
        let net = build_segnet(&SegNetConfig { downsample: ds, ..cfg.clone() }, 0).unwrap();
        assert_eq!(net.output_shape(), &[3, 64, 64]);
    }
}

#[test]
fn config_validation() {
    let base = SegNetConfig::default();
    let bad = [
        SegNetConfig { downsample: 2, ..base.clone() },
        SegNetConfig { input_size: 60, ..base.clone() },
        SegNetConfig { aspp_rates: vec![1, 1], ..base.clone() },
        SegNetConfig { aspp_rates: vec![0, 2], ..base.clone() },
        SegNetConfig { aspp_rates: vec![], ..base.clone() },
    ];
    for cfg in bad {
        assert!(build_segnet(&cfg, 0).is_err(), "{cfg:?}");
    }
}

#[test]
fn constant_input_gives_constant_interior_scores() {
    let cfg = SegNetConfig {
        input_size: 128,
        base_channels: 4,
        ..Default::default()
    };
    let net = build_segnet(&cfg, 3).unwrap();
    let out = net.predict(&vec![0.7f32; 128 * 128]).unwrap();
    for j in 0..3 {
        let plane = &out[j * 128 * 128..(j + 1) * 128 * 128];
        let center = plane[64 * 128 + 64];
        for r in 58..70 {
            for c in 58..70 {
                assert_abs_diff_eq!(plane[r * 128 + c], center, epsilon = 1e-5);
            }
        }
    }
}

#[test]
fn loss_examples() {
    let one = LabelMask::filled(1, 1, 0);
    let w = ClassWeights::from_counts(&[1, 1]).unwrap();
    assert_abs_diff_eq!(balanced_ce_loss(&[0.3, 0.3], &one, &w).unwrap(), 0.693147, epsilon = 1e-6);

    let w = ClassWeights::from_counts(&[80, 20]).unwrap();
    // m / (k·m_j) = 100/160, 100/40
    assert_abs_diff_eq!(w.weights[0], 0.625, epsilon = 1e-12);
    assert_abs_diff_eq!(w.weights[1], 2.5, epsilon = 1e-12);
    // class 1 pixel with uniform scores costs √2.5·ln 2
    let pixel = LabelMask::filled(1, 1, 1);
    assert_abs_diff_eq!(
        balanced_ce_loss(&[0.0, 0.0], &pixel, &w).unwrap(),
        1.5811388 * std::f64::consts::LN_2,
        epsilon = 1e-6
    );

    let unlabeled = LabelMask::filled(2, 2, UNLABELED);
    let err = balanced_ce_loss(&[0.0; 8], &unlabeled, &w).unwrap_err();
    assert!(err.to_string().contains("no labeled pixels"));
    assert!(balanced_ce_loss(&[0.0, 0.0], &LabelMask::filled(1, 1, 2), &w).is_err());
    assert!(ClassWeights::from_counts(&[3, 0]).is_err());
}

#[test]
fn unlabeled_pixels_do_not_contribute() {
    let w = ClassWeights::from_counts(&[1, 1, 1]).unwrap();
    let scores = [0.1, 2.0, -0.3, 0.5, 1.0, 0.0];
    let mask = LabelMask::new(2, 1, vec![1, UNLABELED]).unwrap();
    let (loss, grad) = balanced_ce_loss_grad(&scores, &mask, &w).unwrap();
    let only = LabelMask::filled(1, 1, 1);
    let single = balanced_ce_loss(&[0.1, -0.3, 1.0], &only, &w).unwrap();
    assert_abs_diff_eq!(loss, single, epsilon = 1e-12);
    assert!([1, 3, 5].iter().all(|&i| grad[i] == 0.0));
}

#[test]
fn balanced_loss_gradient_through_segnet() {
    let cfg = SegNetConfig {
        input_size: 16,
        downsample: 8,
        base_channels: 2,
        classes: 3,
        ..Default::default()
    };
    let net = build_segnet(&cfg, 5).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Tensor::new(vec![1, 1, 16, 16], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<u32> = (0..256)
        .map(|i| if i % 7 == 0 { UNLABELED } else { (i / 40 % 3) as u32 })
        .collect();
    let mask = LabelMask::new(16, 16, labels).unwrap();
    let w = ClassWeights::from_masks([&mask], 3).unwrap();
    let loss = |out: &Tensor<f64>| {
        let (l, g) = balanced_ce_loss_grad(&out.data, &mask, &w).unwrap();
        (l, Tensor::new(out.shape.clone(), g).unwrap())
    };
    let report = grad_check(&net, loss, &input, 1e-3, 11).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(scores in prop::collection::vec(-30.0f32..30.0, 4 * 9)) {
        let p = pixel_softmax(&scores, 4, 9);
        for i in 0..9 {
            let sum: f32 = (0..4).map(|j| p[j * 9 + i]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn expansion_preserves_old_channels(data in prop::collection::vec(-3.0f32..3.0, 32 * 32), seed in any::<u64>()) {
        let ckpt = untrained(&small(3));
        let expanded = expand_classes(&ckpt, 9, seed, false).unwrap();
        let before = ckpt.network().unwrap().predict(&data).unwrap();
        let after = expanded.network().unwrap().predict(&data).unwrap();
        prop_assert_eq!(after.len(), before.len() / 3 * 4);
        prop_assert_eq!(&after[..before.len()], &before[..]);
    }
}

fn untrained(cfg: &SegNetConfig) -> Checkpoint {
    let net = build_segnet(cfg, 1).unwrap();
    let meta = SegMeta {
        kind: "segmenter".into(),
        config: cfg.clone(),
        input_mean: 128.0,
        input_scale: 1.0 / 30.0,
    };
    Checkpoint::from_network(&net, 1, (0..cfg.classes as u32).collect(), serde_json::to_value(meta).unwrap())
}

#[test]
fn expansion_rules() {
    let ckpt = untrained(&small(3));
    let a = expand_classes(&ckpt, 7, 4, false).unwrap();
    assert_eq!(a, expand_classes(&ckpt, 7, 4, false).unwrap());
    assert_eq!(a.classes, vec![0, 1, 2, 7]);
    let seg = Segmenter::from_checkpoint(&a).unwrap();
    assert_eq!(seg.meta.config.classes, 4);
    assert!(matches!(expand_classes(&ckpt, 1, 4, false), Err(Error::Conflict(_))));
    let zero = expand_classes(&ckpt, 7, 4, true).unwrap();
    let w = zero.params.iter().find(|p| p.name == "scores.weight").unwrap();
    assert!(w.data[w.data.len() - w.shape[1]..].iter().all(|&v| v == 0.0));
}

#[test]
fn tiling_helpers() {
    assert_eq!(tile_starts(64, 64), vec![0]);
    assert_eq!(tile_starts(100, 64), vec![0, 32, 36]);
    assert_eq!(tile_starts(128, 64), vec![0, 32, 64]);
    let mirrored: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
    assert_eq!(mirrored, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
    assert_eq!(reflect(5, 1), 0);
}

#[test]
fn segmentation_keeps_image_size() {
    let seg = Segmenter::from_checkpoint(&untrained(&small(2))).unwrap();
    let tex = bank_texture("grain").unwrap();
    for (w, h) in [(32, 32), (20, 45), (70, 33), (64, 96)] {
        let out = seg.segment(&render(&tex, w, h, 1)).unwrap();
        assert_eq!((out.mask.width, out.mask.height), (w, h));
        assert_eq!(out.confidence.len(), w * h);
        assert!(out.mask.labels.iter().all(|&l| l < 2));
        assert!(out.confidence.iter().all(|&p| (0.5..=1.0 + 1e-6).contains(&p)));
    }
}

fn two_phase(seed: u64, size: usize) -> (Micrograph, LabelMask) {
    let textures = [bank_texture("smooth").unwrap(), bank_texture("bands-8").unwrap()];
    let regions = two_phase_regions(size, seed);
    (compose(&textures, &regions, seed).unwrap(), regions)
}

#[test]
fn single_collage_overfit() {
    let pair = two_phase(3, 32);
    let tcfg = SegTrainConfig {
        epochs: 150,
        batch_size: 1,
        ..Default::default()
    };
    let (ckpt, log) = train_segnet(&[pair.clone()], &[], &[0, 1], &small(2), &tcfg, None).unwrap();
    let last = log.last().unwrap();
    assert!(last.train_pixel_accuracy >= 0.99, "{last:?}");
    let seg = Segmenter::from_checkpoint(&ckpt).unwrap();
    let m = evaluate(&seg.segment(&pair.0).unwrap().mask, &pair.1, &[0, 1]).unwrap();
    assert!(m.pixel_accuracy >= 0.99, "{m:?}");
}

#[test]
fn training_is_deterministic_and_validates_input() {
    let textures: Vec<_> = ["smooth", "grain", "bands-8"].iter().map(|n| bank_texture(n).unwrap()).collect();
    let data: Vec<_> = (0..3)
        .map(|s| {
            let regions = three_phase_regions(40, s);
            (compose(&textures, &regions, s).unwrap(), regions)
        })
        .collect();
    let tcfg = SegTrainConfig {
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    let cfg = small(3);
    let a = train_segnet(&data, &data[..1], &[0, 1, 2], &cfg, &tcfg, None).unwrap();
    let b = train_segnet(&data, &data[..1], &[0, 1, 2], &cfg, &tcfg, None).unwrap();
    assert_eq!(a, b);
    assert!(a.1[0].val.is_some());

    // a class missing from the training masks has no weight
    assert!(train_segnet(&data, &[], &[0, 1, 2, 3], &small(4), &tcfg, None).is_err());
    // a mask label outside the class list
    assert!(train_segnet(&data, &[], &[0, 1], &small(2), &tcfg, None).is_err());
    // warm start needs a matching class list
    assert!(train_segnet(&data, &[], &[0, 1, 2], &cfg, &tcfg, Some(&expand_classes(&a.0, 5, 0, false).unwrap())).is_err());
    let warm = train_segnet(&data, &[], &[0, 1, 2], &cfg, &tcfg, Some(&a.0)).unwrap();
    assert_ne!(warm.0.params, a.0.params);
}
