mod common;

use apvit::analysis::{grad_check, GradCheckOptions};
use apvit::model::*;
use apvit::{ApvitError, CriterionKind, Params64, Tensor64};
use common::*;

fn small_config() -> ApvitConfig {
    ApvitConfig {
        stem: apvit::StemConfig {
            stages: 2,
            channels: vec![4, 8],
            input_side: 16,
            input_channels: 3,
            linear_tap: true,
        },
        embed_dim: 8,
        blocks: 4,
        heads: 2,
        k: 12,
        r: 0.7,
        ..ApvitConfig::default()
    }
}

fn image(seed: u64, cfg: &ApvitConfig) -> Tensor64 {
    let s = &cfg.stem;
    random(&mut rng(seed), &[s.input_channels, s.input_side, s.input_side]).map(|v| 127.5 + 127.5 * v)
}

/// Initialized weights plus small noise on the zero-initialized tensors.
fn jittered(cfg: &ApvitConfig, seed: u64) -> Params64 {
    let mut p = init_params::<f64>(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    p.for_each_mut(|_, t| *t = t.add(&random(&mut r, t.shape()).scale(0.05)));
    p
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let cfg = ApvitConfig::default();
    let a = encode_checkpoint(&init_params::<f64>(&cfg, 5).unwrap());
    let b = encode_checkpoint(&init_params::<f64>(&cfg, 5).unwrap());
    let c = encode_checkpoint(&init_params::<f64>(&cfg, 6).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_follows_fan_bounds_and_zero_rules() {
    assert!((glorot_bound(64, 64) - (6.0f64 / 128.0).sqrt()).abs() < 1e-15);
    assert!((glorot_bound(64, 64) - 0.21651).abs() < 5e-6);
    assert!((glorot_bound(32, 32) - 0.3062).abs() < 5e-5);
    let cfg = ApvitConfig::default();
    let p = init_params::<f64>(&cfg, 0).unwrap();
    let bound = glorot_bound(64, 64);
    assert!(p.blocks[0].wq.data().iter().all(|v| v.abs() < bound));
    assert!(p.blocks[0].wq.data().iter().any(|v| v.abs() > 0.5 * bound));
    assert!(p.pos_embed.data().iter().all(|&v| v == 0.0));
    assert!(p.cls_token.data().iter().all(|&v| v == 0.0));
    assert!(p.head_b.data().iter().all(|&v| v == 0.0));
    assert!(p.final_gamma.data().iter().all(|&v| v == 1.0));
    assert!(p.final_beta.data().iter().all(|&v| v == 0.0));
}

#[test]
fn logits_have_class_count_in_every_mode() {
    let base = small_config();
    let img = image(1, &base);
    for pooling in [PoolingMode::Hard, PoolingMode::Soft, PoolingMode::None] {
        for head in [HeadKind::Clt, HeadKind::Gap] {
            for criterion in CriterionKind::ALL {
                let cfg = ApvitConfig {
                    pooling,
                    head,
                    criterion,
                    ..base.clone()
                };
                let p = init_params::<f64>(&cfg, 2).unwrap();
                let (logits, diag) = forward(&img, &p, &cfg).unwrap();
                assert_eq!(logits.shape(), &[cfg.num_classes]);
                assert!(logits.data().iter().all(|v| v.is_finite()));
                let sched = cfg.schedule().unwrap();
                for (ids, &n) in diag.trail.iter().zip(&sched.per_block_patch_counts) {
                    assert_eq!(ids.len(), n);
                }
            }
        }
    }
}

#[test]
fn full_keep_hard_equals_no_pooling_exactly() {
    for seed in 0..20 {
        let hard = ApvitConfig {
            k: 16,
            r: 1.0,
            pooling: PoolingMode::Hard,
            ..small_config()
        };
        let none = ApvitConfig {
            pooling: PoolingMode::None,
            ..hard.clone()
        };
        let p = jittered(&hard, seed);
        let img = image(seed, &hard);
        assert_eq!(forward(&img, &p, &hard).unwrap().0, forward(&img, &p, &none).unwrap().0);
    }
}

#[test]
fn saturated_soft_gate_matches_no_pooling() {
    let soft = ApvitConfig {
        pooling: PoolingMode::Soft,
        r: 1.0,
        ..small_config()
    };
    let none = ApvitConfig {
        pooling: PoolingMode::None,
        ..soft.clone()
    };
    for seed in 0..5 {
        let p = jittered(&soft, seed);
        let img = image(seed, &soft);
        let opts = ForwardOptions {
            forced: None,
            pinned_attention: Some(20.0),
        };
        let a = forward_with(&img, &p, &soft, &opts).unwrap().logits;
        let b = forward(&img, &p, &none).unwrap().0;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(rel_err(*x, *y) < 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn predict_takes_first_maximum() {
    assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1 + 7.0, 0.9 + 7.0, 0.3 + 7.0]), 1);
    let cfg = small_config();
    let p = jittered(&cfg, 3);
    let img = image(3, &cfg);
    let (logits, _) = forward(&img, &p, &cfg).unwrap();
    assert_eq!(predict(&img, &p, &cfg).unwrap(), argmax(logits.data()));
}

#[test]
fn invalid_config_fails_before_compute() {
    let bad = ApvitConfig {
        k: 17,
        ..small_config()
    };
    let p = init_params::<f64>(&small_config(), 0).unwrap();
    assert!(matches!(forward(&image(0, &bad), &p, &bad), Err(ApvitError::Config(_))));
    let bad_heads = ApvitConfig {
        heads: 3,
        ..small_config()
    };
    assert!(matches!(init_params::<f64>(&bad_heads, 0), Err(ApvitError::Config(_))));
    let cfg = small_config();
    let wrong = Tensor64::zeros(&[3, 8, 8]);
    assert!(forward(&wrong, &p, &cfg).is_err());
}

#[test]
fn head_gradients_match_tightly() {
    let opts = GradCheckOptions {
        only_prefix: Some("head.".into()),
        ..Default::default()
    };
    let report = grad_check(&small_config(), 0, &opts).unwrap();
    assert_eq!(report.groups.len(), 2);
    assert!(report.worst_error < 1e-6, "{report}");
}

#[test]
fn small_model_gradients_pass_in_every_mode() {
    for pooling in [PoolingMode::Hard, PoolingMode::Soft, PoolingMode::None] {
        for criterion in CriterionKind::ALL {
            let cfg = ApvitConfig {
                pooling,
                criterion,
                lanet_ratio: 2,
                ..small_config()
            };
            let report = grad_check(&cfg, 1, &GradCheckOptions::default()).unwrap();
            assert!(report.passed, "{pooling} {criterion}\n{report}");
        }
    }
}

#[test]
fn flipped_gradient_is_caught_and_named() {
    let opts = GradCheckOptions {
        flip_sign: Some("blocks.1.mlp.w1".into()),
        ..Default::default()
    };
    let report = grad_check(&small_config(), 0, &opts).unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst, "blocks.1.mlp.w1");
    let flagged: Vec<_> = report.groups.iter().filter(|g| g.max_rel_error >= 1e-4).collect();
    assert_eq!(flagged.len(), 1);
    let typo = GradCheckOptions {
        flip_sign: Some("blocks.1.w9".into()),
        ..Default::default()
    };
    assert!(matches!(grad_check(&small_config(), 0, &typo), Err(ApvitError::Config(_))));
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let cfg = ApvitConfig {
        criterion: CriterionKind::Lanet,
        ..small_config()
    };
    let p = jittered(&cfg, 9);
    let bytes = encode_checkpoint(&p);
    assert_eq!(&bytes[..4], b"APVT");
    let back = decode_checkpoint::<f64>(&bytes, &cfg).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &p).unwrap();
    let loaded = load_checkpoint::<f64>(&path, &cfg).unwrap();
    let img = image(4, &cfg);
    assert_eq!(forward(&img, &loaded, &cfg).unwrap().0, forward(&img, &p, &cfg).unwrap().0);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = small_config();
    let bytes = encode_checkpoint(&init_params::<f64>(&cfg, 0).unwrap());
    assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3], &cfg).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode_checkpoint::<f64>(&bad_magic, &cfg).is_err());
    let other = ApvitConfig {
        embed_dim: 16,
        ..cfg.clone()
    };
    assert!(decode_checkpoint::<f64>(&bytes, &other).is_err());
}

#[test]
fn single_precision_tracks_double() {
    let cfg = small_config();
    let p = jittered(&cfg, 11);
    let img = image(11, &cfg);
    let a = forward(&img, &p, &cfg).unwrap().0;
    let b = forward(&img.cast::<f32>(), &p.cast::<f32>(), &cfg).unwrap().0;
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-3);
    }
}
