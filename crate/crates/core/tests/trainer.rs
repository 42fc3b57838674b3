use lora_al::model::{
    init_adapters, AdapterTarget, LoraAdapter, MatrixKind, ModelConfig, ModelSnapshot,
};
use lora_al::numerics::Tensor;
use lora_al::tasks::{self, Example, TaskSpec};
use lora_al::trainer::*;
use lora_al::Error;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        lora_rank: 4,
        ..ModelConfig::default()
    }
}

fn parity(count: usize, seed: u64) -> Vec<Example> {
    let spec: TaskSpec = serde_json::from_str(&format!(
        r#"{{"family":"binary_parity","min_bits":6,"max_bits":10,"count":{count},"seed":{seed}}}"#
    ))
    .unwrap();
    tasks::generate(&spec).unwrap()
}

fn random_adapters(seed: u64) -> Vec<LoraAdapter> {
    let mut ads = init_adapters(&small_config(), 1).unwrap();
    let mut rng = lora_al::seed::rng(seed);
    for ad in &mut ads {
        for v in ad.b.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    ads
}

fn grads_like(ads: &[LoraAdapter], f: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
    ads.iter()
        .flat_map(|a| [a.a.len(), a.b.len()])
        .map(|n| (0..n).map(&f).collect())
        .collect()
}

/// Reference Adam with bias correction, one tensor at a time.
fn reference_adam(p: &[f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, cfg: &TrainConfig, decay: f64) -> Vec<f64> {
    p.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&w, &g))| {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g;
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let mh = m[i] / (1.0 - cfg.adam_beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.adam_beta2.powi(t));
            (1.0 - cfg.learning_rate * decay) * w - cfg.learning_rate * (mh / (vh.sqrt() + cfg.adam_eps))
        })
        .collect()
}

#[test]
fn adam_matches_reference_over_several_steps() {
    let cfg = TrainConfig {
        learning_rate: 0.01,
        b_decay: 0.5,
        ..TrainConfig::default()
    };
    let mut ads = random_adapters(3);
    let mut expected: Vec<Vec<f64>> = ads.iter().flat_map(|a| [a.a.data().to_vec(), a.b.data().to_vec()]).collect();
    let mut m: Vec<Vec<f64>> = expected.iter().map(|e| vec![0.0; e.len()]).collect();
    let mut v = m.clone();
    let mut state = OptimizerState::for_adapters(&ads);
    for step in 1..=4 {
        let grads = grads_like(&ads, |i| ((i * 7 + step) % 5) as f64 - 2.0);
        adam_step_hybrid(&mut ads, &grads, &mut state, &cfg).unwrap();
        for (k, e) in expected.iter_mut().enumerate() {
            let decay = if k % 2 == 1 { cfg.b_decay } else { 0.0 };
            *e = reference_adam(e, &grads[k], &mut m[k], &mut v[k], step as i32, &cfg, decay);
        }
    }
    assert_eq!(state.step(), 4);
    for (ad, pair) in ads.iter().zip(expected.chunks(2)) {
        for (got, want) in [(&ad.a, &pair[0]), (&ad.b, &pair[1])] {
            for (g, w) in got.data().iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn zero_decay_treats_b_like_a() {
    let cfg = TrainConfig {
        b_decay: 0.0,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let mut ads = random_adapters(4);
    let before = ads.clone();
    let grads = grads_like(&ads, |i| (i as f64 * 0.37).sin());
    let mut state = OptimizerState::for_adapters(&ads);
    adam_step_hybrid(&mut ads, &grads, &mut state, &cfg).unwrap();
    for (k, (ad, old)) in ads.iter().zip(&before).enumerate() {
        let mut m = vec![0.0; old.b.len()];
        let mut v = m.clone();
        let want = reference_adam(old.b.data(), &grads[2 * k + 1], &mut m, &mut v, 1, &cfg, 0.0);
        assert_eq!(ad.b.data(), want.as_slice());
    }
}

#[test]
fn pure_decay_step_shrinks_only_b() {
    let cfg = TrainConfig::default();
    let mut ads = random_adapters(5);
    let before = ads.clone();
    let grads = grads_like(&ads, |_| 0.0);
    let mut state = OptimizerState::for_adapters(&ads);
    adam_step_hybrid(&mut ads, &grads, &mut state, &cfg).unwrap();
    let factor = 1.0 - cfg.learning_rate * cfg.b_decay;
    for (ad, old) in ads.iter().zip(&before) {
        assert_eq!(ad.a, old.a);
        let ratio = ad.b.frobenius_norm() / old.b.frobenius_norm();
        assert!((ratio - factor).abs() < 1e-12);
    }
}

#[test]
fn literal_sign_grows_b() {
    let cfg = TrainConfig {
        paper_sign: true,
        ..TrainConfig::default()
    };
    let mut ads = random_adapters(5);
    let before = ads.clone();
    let grads = grads_like(&ads, |_| 0.0);
    adam_step_hybrid(&mut ads, &grads, &mut OptimizerState::for_adapters(&before), &cfg).unwrap();
    let factor = 1.0 + cfg.learning_rate * cfg.b_decay;
    let ratio = ads[0].b.frobenius_norm() / before[0].b.frobenius_norm();
    assert!((ratio - factor).abs() < 1e-12);
}

#[test]
fn first_step_on_a_scalar_quadratic() {
    // Loss (b - c)^2 at b = 2, c = 0.5: gradient 3, and Adam's first
    // direction is g / (|g| + eps).
    let (b0, c) = (2.0, 0.5);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        b_decay: 0.2,
        ..TrainConfig::default()
    };
    let mut ads = vec![LoraAdapter {
        target: AdapterTarget {
            layer: 0,
            matrix: MatrixKind::Query,
        },
        a: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        b: Tensor::new(vec![1, 1], vec![b0]).unwrap(),
        alpha: 1.0,
        rank: 1,
        dropout: 0.0,
    }];
    let g = 2.0 * (b0 - c);
    let mut state = OptimizerState::for_adapters(&ads);
    adam_step_hybrid(&mut ads, &[vec![0.0], vec![g]], &mut state, &cfg).unwrap();
    let want = (1.0 - 0.1 * 0.2) * b0 - 0.1 * g / (g.abs() + cfg.adam_eps);
    assert!((ads[0].b.data()[0] - want).abs() < 1e-15);
    assert!((ads[0].b.data()[0] - (b0 - 0.1 - 0.1 * 0.2 * b0)).abs() < 1e-8);
    assert_eq!(ads[0].a.data()[0], 1.0);
}

#[test]
fn non_finite_gradient_aborts_without_changes() {
    let mut ads = random_adapters(6);
    let before = ads.clone();
    let mut grads = grads_like(&ads, |_| 0.1);
    grads[3][2] = f64::NAN;
    let mut state = OptimizerState::for_adapters(&ads);
    let err = adam_step_hybrid(&mut ads, &grads, &mut state, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(err.to_string().contains("B"), "{err}");
    assert_eq!(ads, before);
    assert_eq!(state.step(), 0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.5,
            b_decay: 2.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn training_leaves_the_base_untouched() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let fp = snap.base.fingerprint();
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = train(&snap, &parity(40, 1), &cfg).unwrap();
    assert_eq!(out.snapshot.base.fingerprint(), fp);
    assert_eq!(out.snapshot.base, snap.base);
    assert_ne!(out.snapshot.adapters, snap.adapters);
    assert_eq!(out.snapshot.snapshot_id, 1);
    assert_eq!(out.epoch_losses.len(), 2);
    assert_eq!(out.steps, 6);
}

#[test]
fn training_is_deterministic() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let data = parity(40, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = train(&snap, &data, &cfg).unwrap();
    let b = train(&snap, &data, &cfg).unwrap();
    assert_eq!(a.snapshot, b.snapshot);
    assert_eq!(a.epoch_losses, b.epoch_losses);
    let c = train(&snap, &data, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.snapshot.adapters, c.snapshot.adapters);
}

#[test]
fn overlong_examples_are_skipped() {
    let tiny = ModelConfig {
        max_seq_len: 8,
        ..small_config()
    };
    let snap = ModelSnapshot::init(tiny, 1, 2).unwrap();
    // Six or more bits plus separator, answer, and stop exceed eight tokens.
    let data = parity(10, 3);
    let out = train(&snap, &data, &TrainConfig::default()).unwrap();
    assert_eq!(out.skipped, 10);
    assert_eq!(out.steps, 0);
    assert_eq!(out.snapshot.adapters, snap.adapters);
    assert!(train(&snap, &[], &TrainConfig::default()).is_err());
}

#[test]
fn overfits_a_small_set() {
    // A frozen random base caps the logit scale, so start from a pretrained one.
    let config = ModelConfig { lora_dropout: 0.0, ..small_config() };
    let init = ModelSnapshot::init(config, 1, 2).unwrap();
    let pre_cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let base = pretrain_base(&init, &parity(256, 40), &pre_cfg, 400).unwrap().snapshot;
    let data = parity(32, 1);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 300,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let before = answer_loss(&base, &data).unwrap();
    let out = train(&base, &data, &cfg).unwrap();
    let after = answer_loss(&out.snapshot, &data).unwrap();
    assert!(after < 0.05, "loss {before} -> {after}");
}

#[test]
fn full_batch_steps_reduce_loss() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let data = parity(16, 5);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 50,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&snap, &data, &cfg).unwrap();
    assert_eq!(out.steps, 50);
    let first = out.epoch_losses[0];
    let last = *out.epoch_losses.last().unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn warmup_starts_from_fresh_adapters() {
    let mut snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    snap.snapshot_id = 7;
    snap.adapters[0].b.data_mut()[0] = 3.0;
    let data = parity(20, 6);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let a = warmup(&snap, &data, &cfg, 11).unwrap();
    let b = warmup(&snap, &data, &cfg, 11).unwrap();
    assert_eq!(a.snapshot.snapshot_id, 1);
    assert_eq!(a.snapshot, b.snapshot);
    let fresh = snap.with_fresh_adapters(11).unwrap();
    let direct = train(&fresh, &data, &cfg).unwrap();
    assert_eq!(direct.snapshot, a.snapshot);
}

#[test]
fn pretraining_moves_only_the_base() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let data = parity(64, 7);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = pretrain_base(&snap, &data, &cfg, 10).unwrap();
    assert_eq!(out.steps, 10);
    assert_eq!(out.snapshot.snapshot_id, 0);
    assert_eq!(out.snapshot.adapters, snap.adapters);
    assert_ne!(out.snapshot.base.fingerprint(), snap.base.fingerprint());
    assert!(answer_loss(&out.snapshot, &data).unwrap() < answer_loss(&snap, &data).unwrap());
}
