use lora_al::model::{
    effective_weight, fixed, forward_logits, forward_logits_base, generate, generate_greedy, init_adapters,
    sequence_logprobs, AdapterTarget, Decode, DropoutMode, LoraAdapter, MatrixKind, ModelConfig, ModelSnapshot,
};
use lora_al::numerics::{softmax_rows, Tensor};
use lora_al::tasks::vocab;
use lora_al::Error;
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 12,
        lora_rank: 4,
        ..ModelConfig::default()
    }
}

/// Snapshot with every `B` filled with small random values.
fn perturbed(config: ModelConfig, seed: u64) -> ModelSnapshot {
    let mut snap = ModelSnapshot::init(config, 11, 12).unwrap();
    let mut rng = lora_al::seed::rng(seed);
    for ad in &mut snap.adapters {
        for v in ad.b.data_mut() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    snap
}

fn random_tokens(rng: &mut impl Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab::VOCAB_SIZE as u32)).collect()
}

/// Singular values via one-sided Jacobi on the columns of `m`.
fn singular_values(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut u: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| m.get(r, c)).collect()).collect();
    for _ in 0..60 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(a, b)| a * b).sum();
                if gamma.abs() < 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (a, b) = (u[p][r], u[q][r]);
                    u[p][r] = c * a - s * b;
                    u[q][r] = s * a + c * b;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[test]
fn singular_value_oracle_recovers_diagonal() {
    let m = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, -5.0, 0.0], vec![0.0, 0.0, 0.5], vec![0.0; 3]]).unwrap();
    let sv = singular_values(&m);
    for (got, want) in sv.iter().zip([5.0, 3.0, 0.5]) {
        assert!((got - want).abs() < 1e-12, "{sv:?}");
    }
}

#[test]
fn fresh_adapters_have_zero_b() {
    let c = ModelConfig::default();
    for ad in init_adapters(&c, 3).unwrap() {
        assert!(ad.b.data().iter().all(|&v| v == 0.0));
        assert!(ad.delta().unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn adapters_cover_every_projection_once() {
    let c = small_config();
    let ads = init_adapters(&c, 3).unwrap();
    assert_eq!(ads.len(), c.n_layers * 6);
    let mut targets: Vec<AdapterTarget> = ads.iter().map(|a| a.target).collect();
    targets.dedup();
    assert_eq!(targets.len(), ads.len());
    for ad in &ads {
        let [d_out, d_in] = c.matrix_shape(ad.target.matrix);
        assert_eq!(ad.a.shape(), &[c.lora_rank, d_in]);
        assert_eq!(ad.b.shape(), &[d_out, c.lora_rank]);
    }
}

#[test]
fn adapter_init_is_deterministic() {
    let c = ModelConfig::default();
    assert_eq!(init_adapters(&c, 9).unwrap(), init_adapters(&c, 9).unwrap());
    assert_ne!(init_adapters(&c, 9).unwrap()[0].a, init_adapters(&c, 10).unwrap()[0].a);
}

#[test]
fn adapter_init_std_is_inverse_sqrt_rank() {
    let c = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        lora_rank: 4,
        ..ModelConfig::default()
    };
    let mut values = Vec::new();
    let mut seed = 0;
    while values.len() < 10_000 {
        for ad in init_adapters(&c, seed).unwrap() {
            values.extend_from_slice(ad.a.data());
        }
        seed += 1;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - 0.5).abs() < 0.1, "std {std}");
}

#[test]
fn zero_adapters_match_the_base_network() {
    let snap = ModelSnapshot::init(ModelConfig::default(), 1, 2).unwrap();
    let mut rng = lora_al::seed::rng(5);
    for len in [1, 7, 30, 64] {
        let toks = random_tokens(&mut rng, len);
        let full = forward_logits(&snap, &toks, DropoutMode::Off).unwrap();
        let base = forward_logits_base(&snap, &toks).unwrap();
        assert_eq!(full.shape(), &[len, vocab::VOCAB_SIZE]);
        assert!(full.max_abs_diff(&base) < 1e-10);
    }
}

#[test]
fn zero_dropout_rate_matches_dropout_off() {
    let mut c = small_config();
    c.lora_dropout = 0.0;
    let snap = perturbed(c, 1);
    let toks = [1, 4, 5, 6, 20, 7];
    let off = forward_logits(&snap, &toks, DropoutMode::Off).unwrap();
    let on = forward_logits(&snap, &toks, DropoutMode::On(77)).unwrap();
    assert_eq!(off, on);
}

#[test]
fn dropout_is_seeded() {
    let snap = perturbed(small_config(), 1);
    let toks = [1, 4, 5, 6, 20, 7];
    let a = forward_logits(&snap, &toks, DropoutMode::On(3)).unwrap();
    let b = forward_logits(&snap, &toks, DropoutMode::On(3)).unwrap();
    let c = forward_logits(&snap, &toks, DropoutMode::On(4)).unwrap();
    let off = forward_logits(&snap, &toks, DropoutMode::Off).unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&c) > 1e-9);
    assert!(a.max_abs_diff(&off) > 1e-9);
}

#[test]
fn overlong_sequence_names_the_limit() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let err = forward_logits(&snap, &[1; 13], DropoutMode::Off).unwrap_err();
    assert!(matches!(err, Error::SequenceTooLong { len: 13, max_seq_len: 12 }));
    assert!(err.to_string().contains("max_seq_len"));
    let err = forward_logits(&snap, &[40], DropoutMode::Off).unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { .. }));
}

#[test]
fn later_tokens_never_change_earlier_logits() {
    let snap = perturbed(small_config(), 2);
    let mut rng = lora_al::seed::rng(8);
    for _ in 0..5 {
        let toks = random_tokens(&mut rng, 10);
        let base = forward_logits(&snap, &toks, DropoutMode::On(1)).unwrap();
        for j in 1..10 {
            let mut other = toks.clone();
            other[j] = (other[j] + 1) % vocab::VOCAB_SIZE as u32;
            let changed = forward_logits(&snap, &other, DropoutMode::On(1)).unwrap();
            for i in 0..j {
                assert_eq!(base.row(i), changed.row(i), "position {i} moved when {j} changed");
            }
        }
    }
}

#[test]
fn prefix_logits_match_full_sequence() {
    let snap = perturbed(small_config(), 2);
    let toks = [1, 4, 9, 20, 5, 21, 13, 3];
    let full = forward_logits(&snap, &toks, DropoutMode::On(6)).unwrap();
    let prefix = forward_logits(&snap, &toks[..5], DropoutMode::On(6)).unwrap();
    for i in 0..5 {
        assert_eq!(full.row(i), prefix.row(i));
    }
}

#[test]
fn effective_weight_with_zero_b_is_the_base() {
    let c = small_config();
    let snap = ModelSnapshot::init(c, 1, 2).unwrap();
    for layer in 0..2 {
        for kind in MatrixKind::ALL {
            let ad = snap.adapter(AdapterTarget { layer, matrix: kind });
            let w = snap.base.layers[layer].matrix(kind);
            assert_eq!(&effective_weight(w, ad).unwrap(), w);
        }
    }
}

#[test]
fn effective_weight_with_unit_scale_is_b_times_a() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let ad = LoraAdapter {
        target: AdapterTarget {
            layer: 0,
            matrix: MatrixKind::Query,
        },
        a,
        b,
        alpha: 2.0,
        rank: 2,
        dropout: 0.0,
    };
    let got = effective_weight(&Tensor::zeros(&[4, 3]), &ad).unwrap();
    let want = Tensor::from_rows(&[
        vec![1.0, 2.0, -1.0],
        vec![0.5, 0.0, 3.0],
        vec![1.5, 2.0, 2.0],
        vec![0.0, 0.0, 0.0],
    ])
    .unwrap();
    assert_eq!(got, want);
    assert!(matches!(effective_weight(&Tensor::zeros(&[3, 4]), &ad), Err(Error::Shape { .. })));
}

#[test]
fn adapter_update_has_rank_at_most_r() {
    let snap = perturbed(small_config(), 4);
    let r = snap.config.lora_rank;
    for ad in &snap.adapters {
        let w = snap.base.layers[ad.target.layer].matrix(ad.target.matrix);
        let eff = effective_weight(w, ad).unwrap();
        let diff = Tensor::new(
            w.shape().to_vec(),
            eff.data().iter().zip(w.data()).map(|(e, b)| e - b).collect(),
        )
        .unwrap();
        let sv = singular_values(&diff);
        assert!(sv[r - 1] > 1e-6, "update should use the full rank");
        assert!(sv[r..].iter().all(|&s| s < 1e-9), "{:?}", &sv[r..]);
    }
}

#[test]
fn greedy_with_zero_budget_is_empty() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    assert!(generate_greedy(&snap, &[1, 4], 0, vocab::EOS).unwrap().is_empty());
}

#[test]
fn greedy_repeats_a_dominant_token() {
    let mut logits = vec![0.0; vocab::VOCAB_SIZE];
    logits[7] = 5.0;
    let snap = fixed::constant_logits(&small_config(), &logits).unwrap();
    assert_eq!(generate_greedy(&snap, &[1], 6, vocab::EOS).unwrap(), vec![7; 6]);
}

#[test]
fn greedy_breaks_ties_by_lowest_id_and_stops() {
    let mut logits = vec![0.0; vocab::VOCAB_SIZE];
    logits[9] = 3.0;
    logits[5] = 3.0;
    let snap = fixed::constant_logits(&small_config(), &logits).unwrap();
    assert_eq!(generate_greedy(&snap, &[1], 3, vocab::EOS).unwrap(), vec![5; 3]);
    assert_eq!(generate_greedy(&snap, &[1], 3, 5).unwrap(), vec![5]);
}

#[test]
fn restricted_decoding_stays_in_the_alphabet() {
    let mut logits = vec![0.0; vocab::VOCAB_SIZE];
    logits[3] = 9.0;
    logits[vocab::FALSE as usize] = 1.0;
    let snap = fixed::constant_logits(&small_config(), &logits).unwrap();
    let d = Decode {
        max_new: 1,
        stop_token: vocab::EOS,
        allowed: Some(vec![vocab::TRUE, vocab::FALSE]),
    };
    let g = generate(&snap, &[1], &d, DropoutMode::Off).unwrap();
    assert_eq!(g.tokens, vec![vocab::FALSE]);
    assert!(g.step_probs[0][3] > 0.9);
    assert!((g.step_probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn generation_respects_the_length_budget() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let err = generate_greedy(&snap, &[1; 10], 3, vocab::EOS).unwrap_err();
    assert!(matches!(err, Error::SequenceTooLong { .. }));
}

#[test]
fn logprob_of_a_half_probability_token() {
    // exp(-800) underflows to zero, leaving two equally likely tokens.
    let mut logits = vec![-800.0; vocab::VOCAB_SIZE];
    logits[4] = 0.0;
    logits[5] = 0.0;
    let snap = fixed::constant_logits(&small_config(), &logits).unwrap();
    let lp = sequence_logprobs(&snap, &[1, 2], &[4]).unwrap();
    assert!((lp[0] - 0.5f64.ln()).abs() < 1e-9);
}

#[test]
fn empty_response_gives_no_logprobs() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    assert!(sequence_logprobs(&snap, &[1], &[]).unwrap().is_empty());
}

#[test]
fn single_token_logprobs_normalize() {
    let snap = perturbed(small_config(), 3);
    let prompt = [1, 4, 20, 5, 3];
    let total: f64 = (0..vocab::VOCAB_SIZE as u32)
        .map(|t| sequence_logprobs(&snap, &prompt, &[t]).unwrap()[0].exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn logprobs_match_forward_logits() {
    let snap = perturbed(small_config(), 3);
    let prompt = [1, 4, 20, 5, 21];
    let response = [9, 13, 2];
    let lp = sequence_logprobs(&snap, &prompt, &response).unwrap();
    let full: Vec<u32> = prompt.iter().chain(&response).copied().collect();
    let probs = softmax_rows(&forward_logits(&snap, &full, DropoutMode::Off).unwrap()).unwrap();
    for (i, &t) in response.iter().enumerate() {
        let want = probs.get(prompt.len() - 1 + i, t as usize).ln();
        assert!((lp[i] - want).abs() < 1e-9);
    }
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let snap = perturbed(small_config(), 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    snap.save(&path).unwrap();
    let back = ModelSnapshot::load(&path).unwrap();
    assert_eq!(back.base.fingerprint(), snap.base.fingerprint());
    for (a, b) in back.adapters.iter().zip(&snap.adapters) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.a), bits(&b.a));
        assert_eq!(bits(&a.b), bits(&b.b));
    }
    assert_eq!(back, snap);
}

#[test]
fn snapshot_rejects_unknown_format_version() {
    let snap = ModelSnapshot::init(small_config(), 1, 2).unwrap();
    let text = snap.to_json().unwrap().replacen("\"format_version\":1", "\"format_version\":99", 1);
    assert!(ModelSnapshot::from_json(&text).is_err());
}

#[test]
fn config_validation() {
    let bad_heads = ModelConfig {
        n_heads: 5,
        ..ModelConfig::default()
    };
    assert!(bad_heads.validate().is_err());
    let bad_rank = ModelConfig {
        lora_rank: 65,
        ..ModelConfig::default()
    };
    assert!(bad_rank.validate().is_err());
    let bad_drop = ModelConfig {
        lora_dropout: 1.0,
        ..ModelConfig::default()
    };
    assert!(bad_drop.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_adapter_equivalence(seed in any::<u64>(), len in 1usize..12) {
        let snap = ModelSnapshot::init(small_config(), seed, seed ^ 1).unwrap();
        let toks = random_tokens(&mut lora_al::seed::rng(seed), len);
        let full = forward_logits(&snap, &toks, DropoutMode::On(seed)).unwrap();
        let base = forward_logits_base(&snap, &toks).unwrap();
        prop_assert!(full.max_abs_diff(&base) <= 1e-10);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), drop in any::<u64>()) {
        let snap = perturbed(small_config(), seed);
        let toks = random_tokens(&mut lora_al::seed::rng(seed), 9);
        let a = forward_logits(&snap, &toks, DropoutMode::On(drop)).unwrap();
        let b = forward_logits(&snap, &toks, DropoutMode::On(drop)).unwrap();
        prop_assert_eq!(a, b);
    }
}
