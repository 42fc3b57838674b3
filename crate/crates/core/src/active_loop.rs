//! Pool-based active learning: warm-up on a random seed set, then rounds of
//! score, query, label, and continued adapter training, with test accuracy
//! after every training call.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, answer_decode, LearningCurve};
use crate::model::{Decode, DropoutMode, ModelSnapshot};
use crate::seed;
use crate::tasks::{render_template, Example, Oracle, TaskFamily};
use crate::trainer::{train, warmup, TrainConfig};
use crate::uncertainty::{
    mc_score_batch, mix, score_batch, write_records, zscore, Flavor, LambdaSchedule, ScoreInput, UncertaintyRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "ME")]
    MaxEntropy,
    #[serde(rename = "PE")]
    PredictiveEntropy,
    #[serde(rename = "ME_STAR")]
    MaxEntropyStar,
    #[serde(rename = "PE_STAR")]
    PredictiveEntropyStar,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Random,
        StrategyKind::MaxEntropy,
        StrategyKind::PredictiveEntropy,
        StrategyKind::MaxEntropyStar,
        StrategyKind::PredictiveEntropyStar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::MaxEntropy => "ME",
            StrategyKind::PredictiveEntropy => "PE",
            StrategyKind::MaxEntropyStar => "ME_STAR",
            StrategyKind::PredictiveEntropyStar => "PE_STAR",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        StrategyKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn flavor(self) -> Option<Flavor> {
        match self {
            StrategyKind::Random => None,
            StrategyKind::MaxEntropy | StrategyKind::MaxEntropyStar => Some(Flavor::MaxEntropy),
            StrategyKind::PredictiveEntropy | StrategyKind::PredictiveEntropyStar => Some(Flavor::PredictiveEntropy),
        }
    }

    /// MC-dropout full-model scores mixed with cached base scores.
    pub fn is_star(self) -> bool {
        matches!(self, StrategyKind::MaxEntropyStar | StrategyKind::PredictiveEntropyStar)
    }
}

/// Query strategy. `schedule` and `mc_passes` only matter for the mixed
/// kinds; plain kinds use the full model with dropout off and weight 0 on
/// the base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub schedule: LambdaSchedule,
    #[serde(rename = "K")]
    pub mc_passes: usize,
}

pub const DEFAULT_MC_PASSES: usize = 5;

impl Strategy {
    /// Linear schedule over `rounds` and the default pass count.
    pub fn new(kind: StrategyKind, rounds: usize) -> Self {
        Strategy {
            kind,
            schedule: LambdaSchedule::linear(rounds.max(1)),
            mc_passes: DEFAULT_MC_PASSES,
        }
    }

    pub fn uses_mc(&self) -> bool {
        self.kind.is_star()
    }

    pub fn uses_mix(&self) -> bool {
        self.kind.is_star()
    }

    /// Base-score weight at round `t`.
    pub fn lambda(&self, t: usize) -> f64 {
        if self.uses_mix() {
            self.schedule.value(t)
        } else {
            0.0
        }
    }

    pub fn passes(&self) -> usize {
        if self.uses_mc() {
            self.mc_passes
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_mix() {
            self.schedule.validate()?;
            if self.mc_passes == 0 {
                return Err(Error::config("K must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
    pub select: u64,
}

impl RunSeeds {
    /// Independent streams derived from one repeat seed.
    pub fn from_repeat(seed: u64) -> Self {
        RunSeeds {
            data: seed::derive(seed, 0),
            model: seed::derive(seed, 1),
            train: seed::derive(seed, 2),
            select: seed::derive(seed, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALRunConfig {
    pub warm_start: usize,
    pub step_size: usize,
    pub budget: usize,
    pub strategy: Strategy,
    pub seeds: RunSeeds,
    pub train: TrainConfig,
    /// When false only the warm-up and final models are evaluated.
    pub eval_every_round: bool,
    /// Start every round from fresh adapters instead of the previous ones.
    #[serde(default)]
    pub reinit_adapters: bool,
    /// Standardize base and full scores over the unlabeled pool before mixing.
    #[serde(default)]
    pub normalize_scores: bool,
}

impl ALRunConfig {
    pub fn rounds(&self) -> usize {
        (self.budget - self.warm_start) / self.step_size
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.warm_start == 0 || self.step_size == 0 {
            return Err(Error::config("warm_start and step_size must be at least 1"));
        }
        if self.budget < self.warm_start || !(self.budget - self.warm_start).is_multiple_of(self.step_size) {
            return Err(Error::config(format!(
                "budget {} must equal warm_start {} plus a whole number of steps of {}",
                self.budget, self.warm_start, self.step_size
            )));
        }
        if self.budget > pool_size {
            return Err(Error::config(format!(
                "budget {} exceeds pool size {pool_size}",
                self.budget
            )));
        }
        self.strategy.validate()?;
        self.train.validate()
    }
}

/// Unlabeled and labeled id sets over a fixed store.
#[derive(Clone, Debug)]
pub struct Pool {
    unlabeled: BTreeSet<u64>,
    labeled: Vec<u64>,
    store: BTreeMap<u64, Example>,
}

impl Pool {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut store = BTreeMap::new();
        for ex in examples {
            let id = ex.id;
            if store.insert(id, ex).is_some() {
                return Err(Error::contract(format!("duplicate example id {id}")));
            }
        }
        Ok(Pool {
            unlabeled: store.keys().copied().collect(),
            labeled: Vec::new(),
            store,
        })
    }

    pub fn unlabeled(&self) -> &BTreeSet<u64> {
        &self.unlabeled
    }

    /// Labeled ids in the order they were added.
    pub fn labeled(&self) -> &[u64] {
        &self.labeled
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn get(&self, id: u64) -> Result<&Example> {
        self.store.get(&id).ok_or(Error::UnknownId(id))
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.store.values()
    }

    /// Moves `ids` from unlabeled to labeled.
    pub fn mark_labeled(&mut self, ids: &[u64]) -> Result<()> {
        for &id in ids {
            if !self.unlabeled.contains(&id) {
                return Err(if self.store.contains_key(&id) {
                    Error::contract(format!("example {id} is already labeled"))
                } else {
                    Error::UnknownId(id)
                });
            }
        }
        for &id in ids {
            self.unlabeled.remove(&id);
            self.labeled.push(id);
        }
        Ok(())
    }
}

/// Attaches oracle answers to the selected pool examples. Does not move them.
pub fn label(oracle: &Oracle, pool: &Pool, ids: &[u64]) -> Result<Vec<Example>> {
    ids.iter()
        .map(|&id| {
            let mut ex = pool.get(id)?.clone();
            ex.gold = oracle.answer(id)?;
            Ok(ex)
        })
        .collect()
}

fn score_inputs<'a>(rendered: &'a [Vec<u32>], examples: &[&'a Example]) -> Vec<ScoreInput<'a>> {
    rendered
        .iter()
        .zip(examples)
        .map(|(prompt, ex)| ScoreInput {
            prompt,
            golden: Some(&ex.gold),
        })
        .collect()
}

/// Base-model score of every pool example, dropout off.
pub fn precompute_base_scores(
    base: &ModelSnapshot,
    pool: &Pool,
    flavor: Flavor,
    decode: &Decode,
) -> Result<BTreeMap<u64, f64>> {
    if base.snapshot_id != 0 || base.adapters.iter().any(|a| a.b.data().iter().any(|&v| v != 0.0)) {
        return Err(Error::contract("base scores need the untuned snapshot with zero adapters"));
    }
    let examples: Vec<&Example> = pool.examples().collect();
    let rendered: Vec<Vec<u32>> = examples.iter().map(|e| render_template(e)).collect();
    let items = score_inputs(&rendered, &examples);
    let scores = score_batch(base, &items, flavor, decode, &vec![DropoutMode::Off; items.len()])?;
    Ok(examples.iter().map(|e| e.id).zip(scores).collect())
}

/// The `m` highest-scoring ids, ties by ascending id.
pub fn query(scores: &BTreeMap<u64, f64>, m: usize) -> Vec<u64> {
    let mut ranked: Vec<(u64, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(m).map(|(id, _)| id).collect()
}

/// Seeded uniform draw of `m` ids without replacement.
pub fn random_selection(unlabeled: &BTreeSet<u64>, m: usize, seed: u64) -> Vec<u64> {
    let mut ids: Vec<u64> = unlabeled.iter().copied().collect();
    ids.shuffle(&mut seed::rng(seed));
    ids.truncate(m);
    ids
}

/// Everything the loop needs besides the config.
#[derive(Clone, Debug)]
pub struct RunData {
    pub family: TaskFamily,
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Space-separated in the CSV.
    #[serde(with = "id_list")]
    pub selected_ids: Vec<u64>,
    pub unlabeled_before: usize,
    pub unlabeled_after: usize,
    pub labeled_after: usize,
    /// Test accuracy of the model trained after this round's labeling.
    pub accuracy: Option<f64>,
    pub uncertainty_csv: Option<String>,
}

mod id_list {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ids: &[u64], s: S) -> Result<S::Ok, S::Error> {
        let text: Vec<String> = ids.iter().map(u64::to_string).collect();
        s.serialize_str(&text.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
        let text = String::deserialize(d)?;
        text.split_whitespace()
            .map(|t| t.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    /// `warmup` or the query round index.
    pub round: String,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub curve: LearningCurve,
    pub rounds: Vec<RoundRecord>,
    /// Per round, one record per unlabeled example scored.
    pub uncertainty: Vec<Vec<UncertaintyRecord>>,
    /// Cached base scores; empty for the random strategy.
    pub base_scores: BTreeMap<u64, f64>,
    pub train_log: Vec<TrainLogRow>,
    pub final_snapshot: ModelSnapshot,
    pub wall_seconds: Vec<f64>,
}

fn log_epochs(log: &mut Vec<TrainLogRow>, round: String, losses: &[f64]) {
    log.extend(losses.iter().enumerate().map(|(epoch, &mean_loss)| TrainLogRow {
        round: round.clone(),
        epoch,
        mean_loss,
    }));
}

/// Warm-up followed by `cfg.rounds()` query rounds.
pub fn run(cfg: &ALRunConfig, data: &RunData, base: &ModelSnapshot) -> Result<RunOutcome> {
    cfg.validate(data.pool.len())?;
    let decode = answer_decode(&data.family);
    let oracle = Oracle::from_examples(data.family.kind(), &data.pool);
    let mut pool = Pool::new(data.pool.clone())?;
    let strategy = &cfg.strategy;
    let round_train = |stage: u64| TrainConfig {
        seed: seed::derive(cfg.seeds.train, stage),
        ..cfg.train.clone()
    };
    let evaluate = |snap: &ModelSnapshot| accuracy(snap, &data.test, &decode);

    let base_scores = match strategy.kind.flavor() {
        Some(flavor) => precompute_base_scores(base, &pool, flavor, &decode)?,
        None => BTreeMap::new(),
    };

    let warm_ids = random_selection(
        pool.unlabeled(),
        cfg.warm_start,
        seed::derive_path(cfg.seeds.select, &[seed::stream::SELECT, 0]),
    );
    let mut labeled = label(&oracle, &pool, &warm_ids)?;
    pool.mark_labeled(&warm_ids)?;
    let mut train_log = Vec::new();
    let trained = warmup(base, &labeled, &round_train(0), cfg.seeds.model)?;
    log_epochs(&mut train_log, "warmup".into(), &trained.epoch_losses);
    let mut current = trained.snapshot;
    let mut points = vec![(labeled.len(), evaluate(&current)?)];
    info!("warm-up on {} examples: accuracy {:.4}", labeled.len(), points[0].1);

    let n_rounds = cfg.rounds();
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut uncertainty = Vec::with_capacity(n_rounds);
    let mut wall_seconds = Vec::with_capacity(n_rounds);
    for t in 0..n_rounds {
        let started = Instant::now();
        let step = (|| -> Result<(RoundRecord, Vec<UncertaintyRecord>)> {
            let unlabeled_before = pool.unlabeled().len();
            let (selected, records) = match strategy.kind.flavor() {
                None => {
                    let s = seed::derive_path(cfg.seeds.select, &[seed::stream::SELECT, t as u64 + 1]);
                    (random_selection(pool.unlabeled(), cfg.step_size, s), Vec::new())
                }
                Some(flavor) => {
                    let records = score_round(cfg, &pool, &current, &base_scores, flavor, &decode, t)?;
                    let mu: BTreeMap<u64, f64> = records.iter().map(|r| (r.example_id, r.mu)).collect();
                    (query(&mu, cfg.step_size), records)
                }
            };
            let mut new = label(&oracle, &pool, &selected)?;
            pool.mark_labeled(&selected)?;
            labeled.append(&mut new);
            let trained = if cfg.reinit_adapters {
                warmup(base, &labeled, &round_train(t as u64 + 1), seed::derive(cfg.seeds.model, t as u64 + 1))?
            } else {
                train(&current, &labeled, &round_train(t as u64 + 1))?
            };
            log_epochs(&mut train_log, t.to_string(), &trained.epoch_losses);
            current = trained.snapshot;
            let acc = if cfg.eval_every_round || t + 1 == n_rounds {
                Some(evaluate(&current)?)
            } else {
                None
            };
            Ok((
                RoundRecord {
                    round: t,
                    selected_ids: selected,
                    unlabeled_before,
                    unlabeled_after: pool.unlabeled().len(),
                    labeled_after: pool.labeled().len(),
                    accuracy: acc,
                    uncertainty_csv: strategy.kind.flavor().map(|_| format!("uncertainty/round_{t}.csv")),
                },
                records,
            ))
        })();
        let (record, records) = step.map_err(|e| e.in_round(t))?;
        if let Some(acc) = record.accuracy {
            points.push((record.labeled_after, acc));
        }
        info!(
            "round {t}: {} labeled, accuracy {:?}",
            record.labeled_after, record.accuracy
        );
        rounds.push(record);
        uncertainty.push(records);
        wall_seconds.push(started.elapsed().as_secs_f64());
        if pool.unlabeled().is_empty() {
            break;
        }
    }

    Ok(RunOutcome {
        curve: LearningCurve::new(points)?,
        rounds,
        uncertainty,
        base_scores,
        train_log,
        final_snapshot: current,
        wall_seconds,
    })
}

/// Scores every unlabeled example for round `t`.
fn score_round(
    cfg: &ALRunConfig,
    pool: &Pool,
    current: &ModelSnapshot,
    base_scores: &BTreeMap<u64, f64>,
    flavor: Flavor,
    decode: &Decode,
    t: usize,
) -> Result<Vec<UncertaintyRecord>> {
    let strategy = &cfg.strategy;
    let examples: Vec<&Example> = pool.unlabeled().iter().map(|&id| pool.get(id)).collect::<Result<_>>()?;
    let rendered: Vec<Vec<u32>> = examples.iter().map(|e| render_template(e)).collect();
    let items = score_inputs(&rendered, &examples);
    let mut mu_f = if strategy.uses_mc() {
        let round_seed = seed::derive_path(cfg.seeds.select, &[seed::stream::MC_PASS, t as u64]);
        let seeds: Vec<u64> = examples.iter().map(|e| seed::derive(round_seed, e.id)).collect();
        mc_score_batch(current, &items, flavor, decode, strategy.mc_passes, &seeds)?
    } else {
        score_batch(current, &items, flavor, decode, &vec![DropoutMode::Off; items.len()])?
    };
    let mut mu_b: Vec<f64> = examples.iter().map(|e| base_scores[&e.id]).collect();
    if cfg.normalize_scores {
        zscore(&mut mu_b);
        zscore(&mut mu_f);
    }
    let lambda = strategy.lambda(t);
    examples
        .iter()
        .zip(mu_b.iter().zip(&mu_f))
        .map(|(e, (&b, &f))| {
            Ok(UncertaintyRecord {
                round: t,
                example_id: e.id,
                flavor,
                mu_b: b,
                mu_f: f,
                lambda,
                mu: mix(b, f, lambda)?,
                k_passes: strategy.passes(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct Timing<'a> {
    round_seconds: &'a [f64],
}

/// Writes `config.json`, `rounds.csv`, `curve.csv`, `train_log.csv`,
/// `base_scores.csv`, `uncertainty/round_t.csv`, and `timing.json`. All
/// files except `timing.json` are pure functions of config and seeds.
pub fn write_run_dir(dir: &Path, cfg: &ALRunConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut w = csv::Writer::from_path(dir.join("rounds.csv"))?;
    for r in &outcome.rounds {
        w.serialize(r)?;
    }
    w.flush()?;
    outcome.curve.write_csv(&dir.join("curve.csv"))?;
    let mut w = csv::Writer::from_path(dir.join("train_log.csv"))?;
    for row in &outcome.train_log {
        w.serialize(row)?;
    }
    w.flush()?;
    if !outcome.base_scores.is_empty() {
        write_base_scores(&dir.join("base_scores.csv"), &outcome.base_scores)?;
        fs::create_dir_all(dir.join("uncertainty"))?;
        for (t, records) in outcome.uncertainty.iter().enumerate() {
            write_records(&dir.join(format!("uncertainty/round_{t}.csv")), records)?;
        }
    }
    fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&Timing {
            round_seconds: &outcome.wall_seconds,
        })?,
    )?;
    Ok(())
}

pub fn write_base_scores(path: &Path, scores: &BTreeMap<u64, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["example_id", "mu_b"])?;
    for (id, s) in scores {
        w.write_record([id.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_base_scores(path: &Path) -> Result<BTreeMap<u64, f64>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
