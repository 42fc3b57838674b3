use std::collections::{BTreeMap, BTreeSet, HashSet};

use lora_al::active_loop::*;
use lora_al::metrics::answer_decode;
use lora_al::model::{ModelConfig, ModelSnapshot};
use lora_al::tasks::{self, closed_form_answer, render_template, Oracle, TaskSpec};
use lora_al::trainer::TrainConfig;
use lora_al::uncertainty::{predictive_entropy_score, Flavor};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 16,
        lora_rank: 4,
        ..ModelConfig::default()
    }
}

fn parity_spec(count: usize, seed: u64) -> TaskSpec {
    serde_json::from_str(&format!(
        r#"{{"family":"binary_parity","min_bits":6,"max_bits":10,"count":{count},"seed":{seed}}}"#
    ))
    .unwrap()
}

fn toy_data() -> RunData {
    let spec = parity_spec(100, 7);
    let all = tasks::generate(&spec).unwrap();
    RunData {
        family: spec.family,
        pool: all[..60].to_vec(),
        test: all[60..].to_vec(),
    }
}

fn base() -> ModelSnapshot {
    ModelSnapshot::init(small_config(), 3, 0).unwrap()
}

fn toy_config(kind: StrategyKind, budget: usize) -> ALRunConfig {
    let rounds = (budget - 10) / 10;
    ALRunConfig {
        warm_start: 10,
        step_size: 10,
        budget,
        strategy: Strategy::new(kind, rounds),
        seeds: RunSeeds::from_repeat(0),
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
        eval_every_round: true,
        reinit_adapters: false,
        normalize_scores: false,
    }
}

#[test]
fn query_takes_highest_scores_with_low_id_ties() {
    let scores: BTreeMap<u64, f64> = [(10, 3.0), (11, 1.0), (12, 2.0)].into();
    assert_eq!(query(&scores, 2), vec![10, 12]);
    let flat: BTreeMap<u64, f64> = (0..8).rev().map(|i| (i, 0.5)).collect();
    assert_eq!(query(&flat, 3), vec![0, 1, 2]);
    assert_eq!(query(&scores, 10).len(), 3);
    assert!(query(&BTreeMap::new(), 4).is_empty());
}

#[test]
fn random_selection_replays_a_seeded_shuffle() {
    let ids: BTreeSet<u64> = (100..200).collect();
    let a = random_selection(&ids, 10, 42);
    assert_eq!(a, random_selection(&ids, 10, 42));
    assert_ne!(a, random_selection(&ids, 10, 43));
    let longer = random_selection(&ids, 30, 42);
    assert_eq!(&longer[..10], &a[..]);
    assert_eq!(a.iter().collect::<HashSet<_>>().len(), 10);
}

#[test]
fn strategy_flags() {
    for kind in StrategyKind::ALL {
        assert_eq!(StrategyKind::from_name(kind.name()), Some(kind));
        let s = Strategy::new(kind, 10);
        assert_eq!(s.uses_mc(), kind.is_star());
        assert_eq!(s.uses_mix(), kind.is_star());
        if !kind.is_star() {
            assert!((0..20).all(|t| s.lambda(t) == 0.0));
            assert_eq!(s.passes(), 1);
        }
    }
    let star = Strategy::new(StrategyKind::MaxEntropyStar, 10);
    assert_eq!(star.lambda(0), 1.0);
    assert_eq!(star.passes(), DEFAULT_MC_PASSES);
    assert_eq!(StrategyKind::from_name("entropy"), None);
}

#[test]
fn config_validation() {
    let mut cfg = toy_config(StrategyKind::Random, 40);
    assert_eq!(cfg.rounds(), 3);
    assert!(cfg.validate(60).is_ok());
    assert!(cfg.validate(30).is_err());
    cfg.budget = 45;
    assert!(cfg.validate(60).is_err());
    cfg.budget = 5;
    assert!(cfg.validate(60).is_err());
}

#[test]
fn base_scores_cover_the_pool_deterministically() {
    let data = toy_data();
    let pool = Pool::new(data.pool.clone()).unwrap();
    let dec = answer_decode(&data.family);
    let a = precompute_base_scores(&base(), &pool, Flavor::PredictiveEntropy, &dec).unwrap();
    let b = precompute_base_scores(&base(), &pool, Flavor::PredictiveEntropy, &dec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), pool.len());
    for ex in data.pool.iter().step_by(12).take(5) {
        let direct = predictive_entropy_score(&base(), &render_template(ex), &ex.gold).unwrap();
        assert_eq!(a[&ex.id], direct);
    }
}

#[test]
fn base_scores_require_the_untuned_snapshot() {
    let data = toy_data();
    let pool = Pool::new(data.pool.clone()).unwrap();
    let mut snap = base();
    snap.snapshot_id = 1;
    let dec = answer_decode(&data.family);
    assert!(precompute_base_scores(&snap, &pool, Flavor::MaxEntropy, &dec).is_err());
}

#[test]
fn labeling_attaches_oracle_answers() {
    let data = toy_data();
    let pool = Pool::new(data.pool.clone()).unwrap();
    let oracle = Oracle::from_examples(data.family.kind(), &data.pool);
    let ids: Vec<u64> = data.pool.iter().step_by(6).map(|e| e.id).collect();
    assert_eq!(ids.len(), 10);
    let first = label(&oracle, &pool, &ids).unwrap();
    assert_eq!(first, label(&oracle, &pool, &ids).unwrap());
    for ex in &first {
        assert!(!ex.gold.is_empty());
        assert_eq!(ex.gold, closed_form_answer(ex.task, &ex.prompt).unwrap());
    }
    assert!(label(&oracle, &pool, &[u64::MAX]).is_err());
}

#[test]
fn pool_moves_ids_once() {
    let data = toy_data();
    let mut pool = Pool::new(data.pool.clone()).unwrap();
    let id = data.pool[0].id;
    pool.mark_labeled(&[id]).unwrap();
    assert!(pool.mark_labeled(&[id]).is_err());
    assert!(pool.mark_labeled(&[u64::MAX]).is_err());
    assert_eq!(pool.unlabeled().len() + pool.labeled().len(), 60);
    let mut dup = data.pool[..2].to_vec();
    dup[1].id = dup[0].id;
    assert!(Pool::new(dup).is_err());
}

#[test]
fn warm_start_only_run_has_one_point() {
    let out = run(&toy_config(StrategyKind::Random, 10), &toy_data(), &base()).unwrap();
    assert_eq!(out.curve.points().len(), 1);
    assert_eq!(out.curve.points()[0].0, 10);
    assert!(out.rounds.is_empty());
}

#[test]
fn bookkeeping_over_three_rounds() {
    for kind in [StrategyKind::Random, StrategyKind::MaxEntropy, StrategyKind::PredictiveEntropyStar] {
        let out = run(&toy_config(kind, 40), &toy_data(), &base()).unwrap();
        let budgets: Vec<usize> = out.curve.points().iter().map(|p| p.0).collect();
        assert_eq!(budgets, vec![10, 20, 30, 40]);
        let mut seen = HashSet::new();
        for (t, r) in out.rounds.iter().enumerate() {
            assert_eq!(r.round, t);
            assert_eq!(r.selected_ids.len(), 10);
            assert_eq!(r.unlabeled_before, 50 - 10 * t);
            assert_eq!(r.unlabeled_after, r.unlabeled_before - 10);
            assert_eq!(r.labeled_after + r.unlabeled_after, 60);
            assert!(r.selected_ids.iter().all(|id| seen.insert(*id)));
        }
        assert_eq!(out.uncertainty.len(), 3);
        if kind == StrategyKind::Random {
            assert!(out.base_scores.is_empty());
            assert!(out.uncertainty.iter().all(Vec::is_empty));
        } else {
            assert_eq!(out.base_scores.len(), 60);
            for (t, recs) in out.uncertainty.iter().enumerate() {
                assert_eq!(recs.len(), out.rounds[t].unlabeled_before);
            }
        }
    }
}

#[test]
fn selection_follows_the_logged_scores() {
    let out = run(&toy_config(StrategyKind::MaxEntropyStar, 40), &toy_data(), &base()).unwrap();
    let strategy = Strategy::new(StrategyKind::MaxEntropyStar, 3);
    for (t, recs) in out.uncertainty.iter().enumerate() {
        for r in recs {
            assert_eq!(r.lambda, strategy.schedule.value(t));
            assert_eq!(r.mu_b, out.base_scores[&r.example_id]);
            assert_eq!(r.k_passes, DEFAULT_MC_PASSES);
            assert_eq!(r.mu, r.lambda * r.mu_b + (1.0 - r.lambda) * r.mu_f);
        }
        let mu: BTreeMap<u64, f64> = recs.iter().map(|r| (r.example_id, r.mu)).collect();
        assert_eq!(out.rounds[t].selected_ids, query(&mu, 10));
    }
}

#[test]
fn runs_are_reproducible_and_write_stable_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(StrategyKind::MaxEntropyStar, 30);
    for name in ["a", "b"] {
        let out = run(&cfg, &toy_data(), &base()).unwrap();
        write_run_dir(&dir.path().join(name), &cfg, &out).unwrap();
    }
    for file in [
        "config.json",
        "rounds.csv",
        "curve.csv",
        "train_log.csv",
        "base_scores.csv",
        "uncertainty/round_0.csv",
        "uncertainty/round_1.csv",
    ] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    assert!(dir.path().join("a/timing.json").exists());
    let rounds = read_rounds(&dir.path().join("a/rounds.csv")).unwrap();
    assert_eq!(rounds.len(), 2);
    assert_eq!(rounds[1].uncertainty_csv.as_deref(), Some("uncertainty/round_1.csv"));
    let scores = read_base_scores(&dir.path().join("a/base_scores.csv")).unwrap();
    assert_eq!(scores.len(), 60);
}

#[test]
fn random_curves_do_not_depend_on_worker_count() {
    let cfg = toy_config(StrategyKind::Random, 30);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let a = one.install(|| run(&cfg, &toy_data(), &base()).unwrap());
    let b = three.install(|| run(&cfg, &toy_data(), &base()).unwrap());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.rounds, b.rounds);
}

#[test]
fn reinitialized_rounds_still_complete() {
    let mut cfg = toy_config(StrategyKind::MaxEntropy, 30);
    cfg.reinit_adapters = true;
    cfg.normalize_scores = true;
    let out = run(&cfg, &toy_data(), &base()).unwrap();
    assert_eq!(out.curve.points().len(), 3);
    assert_eq!(out.final_snapshot.base.fingerprint(), base().base.fingerprint());
}
