//! The five subcommands. Each writes into its own directory under the
//! output root and refuses to touch an existing one unless forced.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::Serialize;

use lora_al::active_loop::{self, read_base_scores, read_rounds, random_selection, RunData, RunSeeds, StrategyKind};
use lora_al::metrics::{auc, confidence_probe, entropy_correlation, ConfidenceReport, LearningCurve, ScoreTable};
use lora_al::model::ModelSnapshot;
use lora_al::seed;
use lora_al::tasks::{self, Example, TaskSpec};
use lora_al::trainer::{pretrain_base, warmup, TrainConfig};
use lora_al::uncertainty::read_records;

use crate::config::ExperimentConfig;
use crate::report::{self, TableRow};

/// Clears `dir` when forced; otherwise fails if it holds anything.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if occupied {
        if !force {
            bail!("{} already exists and is not empty (use --force to replace it)", dir.display());
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    ensure!(
        path.exists(),
        "missing {what} at {} (run `{producer}` first)",
        path.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataCounts {
    pub pool: usize,
    pub test: usize,
    pub pretrain: usize,
}

/// Pool, test, and pretraining sets with pairwise disjoint prompts.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let spec = |count, stream| TaskSpec {
        family: cfg.task.clone(),
        count,
        seed: seed::derive(cfg.data.seed, stream),
    };
    let pool = tasks::generate(&spec(cfg.data.pool_size, 0))?;
    let mut seen: HashSet<Vec<u32>> = pool.iter().map(|e| e.prompt.clone()).collect();
    let test = tasks::generate_excluding(&spec(cfg.data.test_size, 1), pool.len() as u64, &seen)?;
    seen.extend(test.iter().map(|e| e.prompt.clone()));
    let first = (pool.len() + test.len()) as u64;
    let pretrain = tasks::generate_excluding(&spec(cfg.data.pretrain_size, 2), first, &seen)?;
    Ok((pool, test, pretrain))
}

pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> Result<DataCounts> {
    let layout = cfg.layout();
    claim_dir(&layout.data_dir(), force)?;
    let (pool, test, pretrain) = generate_data(cfg)?;
    tasks::save_jsonl(&pool, &layout.pool())?;
    tasks::save_jsonl(&test, &layout.test())?;
    tasks::save_jsonl(&pretrain, &layout.pretrain_corpus())?;
    Ok(DataCounts {
        pool: pool.len(),
        test: test.len(),
        pretrain: pretrain.len(),
    })
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub path: PathBuf,
    pub final_loss: Option<f64>,
    pub steps: u64,
    pub fingerprint: String,
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    mean_loss: f64,
}

pub fn pretrain(cfg: &ExperimentConfig, force: bool) -> Result<PretrainSummary> {
    let layout = cfg.layout();
    require(&layout.pretrain_corpus(), "pretraining corpus", "gen-data")?;
    let corpus = tasks::load_jsonl(&layout.pretrain_corpus())?;
    claim_dir(&layout.base_dir(), force)?;
    let init = ModelSnapshot::init(cfg.model.clone(), seed::derive(cfg.pretrain.seed, seed::stream::BASE_INIT), 0)?;
    let (snapshot, losses, steps) = if cfg.pretrain.steps == 0 {
        (init, Vec::new(), 0)
    } else {
        let train_cfg = TrainConfig {
            learning_rate: cfg.pretrain.learning_rate,
            batch_size: cfg.pretrain.batch_size,
            seed: seed::derive(cfg.pretrain.seed, seed::stream::SHUFFLE),
            ..TrainConfig::default()
        };
        let out = pretrain_base(&init, &corpus, &train_cfg, cfg.pretrain.steps)?;
        (out.snapshot, out.epoch_losses, out.steps)
    };
    let path = layout.base_snapshot();
    snapshot.save(&path)?;
    let mut w = csv::Writer::from_path(layout.base_dir().join("pretrain_log.csv"))?;
    for (epoch, &mean_loss) in losses.iter().enumerate() {
        w.serialize(LossRow { epoch, mean_loss })?;
    }
    w.flush()?;
    Ok(PretrainSummary {
        path,
        final_loss: losses.last().copied(),
        steps,
        fingerprint: snapshot.base.fingerprint(),
    })
}

struct Inputs {
    data: RunData,
    base: ModelSnapshot,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let layout = cfg.layout();
    require(&layout.pool(), "pool", "gen-data")?;
    require(&layout.test(), "test set", "gen-data")?;
    require(&layout.base_snapshot(), "base snapshot", "pretrain")?;
    let base = ModelSnapshot::load(&layout.base_snapshot())?;
    ensure!(
        base.config == cfg.model,
        "base snapshot was trained with a different model config"
    );
    Ok(Inputs {
        data: RunData {
            family: cfg.task.clone(),
            pool: tasks::load_jsonl(&layout.pool())?,
            test: tasks::load_jsonl(&layout.test())?,
        },
        base,
    })
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub dir: PathBuf,
    pub curve: LearningCurve,
    /// `None` for a single-point curve.
    pub auc: Option<f64>,
}

/// Every configured strategy under every repeat seed, in that order.
pub fn run(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RunSummary>> {
    let inputs = load_inputs(cfg)?;
    let layout = cfg.layout();
    let mut out = Vec::new();
    for &kind in &cfg.strategies {
        for &s in &cfg.repeat_seeds {
            let dir = layout.run_dir(kind, s);
            claim_dir(&dir, force)?;
            let run_cfg = cfg.run_config(kind, s);
            let outcome = active_loop::run(&run_cfg, &inputs.data, &inputs.base)
                .with_context(|| format!("strategy {} seed {s}", kind.name()))?;
            active_loop::write_run_dir(&dir, &run_cfg, &outcome)?;
            let auc = auc(&outcome.curve).ok();
            info!("{} seed {s}: AUC {auc:?}", kind.name());
            out.push(RunSummary {
                strategy: kind,
                seed: s,
                dir,
                curve: outcome.curve,
                auc,
            });
        }
    }
    Ok(out)
}

/// Reads every configured run's curve and writes `table.csv` and
/// `curves.csv`.
pub fn report(cfg: &ExperimentConfig, baseline: StrategyKind, force: bool) -> Result<Vec<TableRow>> {
    let layout = cfg.layout();
    let mut curves: BTreeMap<StrategyKind, Vec<(u64, LearningCurve)>> = BTreeMap::new();
    let mut kinds = cfg.strategies.clone();
    if !kinds.contains(&baseline) {
        kinds.insert(0, baseline);
    }
    for &kind in &kinds {
        for &s in &cfg.repeat_seeds {
            let path = layout.run_dir(kind, s).join("curve.csv");
            if path.exists() {
                curves.entry(kind).or_default().push((s, LearningCurve::read_csv(&path)?));
            }
        }
    }
    ensure!(
        curves.contains_key(&baseline),
        "no {} runs found under {}",
        baseline.name(),
        layout.root().join("runs").display()
    );
    let mut aucs: Vec<(StrategyKind, Vec<f64>)> = Vec::new();
    for &kind in &kinds {
        if let Some(runs) = curves.get(&kind) {
            let values = runs
                .iter()
                .map(|(s, c)| auc(c).with_context(|| format!("{} seed {s}", kind.name())))
                .collect::<Result<Vec<_>>>()?;
            aucs.push((kind, values));
        }
    }
    let rows = report::summarize(&aucs, baseline)?;
    let dir = layout.report_dir();
    claim_dir(&dir, force)?;
    report::write_table(&dir.join("table.csv"), &rows)?;
    report::write_curves(&dir.join("curves.csv"), &curves)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeKind {
    Confidence,
    Correlation,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidenceRow {
    pub seed: u64,
    pub model: String,
    pub total: usize,
    pub wrong: usize,
    pub mean_cf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub seed: u64,
    pub rounds: usize,
    pub examples: usize,
    pub corr_0_1: f64,
    pub corr_5_6: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ProbeSummary {
    pub confidence: Vec<ConfidenceRow>,
    pub correlation: Vec<CorrelationRow>,
}

pub fn probe(cfg: &ExperimentConfig, kind: ProbeKind, force: bool) -> Result<ProbeSummary> {
    let mut summary = ProbeSummary::default();
    if matches!(kind, ProbeKind::Confidence | ProbeKind::All) {
        summary.confidence = probe_confidence(cfg, force)?;
    }
    if matches!(kind, ProbeKind::Correlation | ProbeKind::All) {
        summary.correlation = probe_correlation(cfg, force)?;
    }
    Ok(summary)
}

fn write_wrong(path: &Path, report: &ConfidenceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["example_id", "cf"])?;
    for (id, cf) in &report.wrong {
        w.write_record([id.to_string(), cf.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Frozen base against adapters trained for `probe.epochs` on
/// `probe.train_size` random pool examples, once per repeat seed.
fn probe_confidence(cfg: &ExperimentConfig, force: bool) -> Result<Vec<ConfidenceRow>> {
    let inputs = load_inputs(cfg)?;
    let dir = cfg.layout().probe_dir("confidence");
    claim_dir(&dir, force)?;
    let base_report = confidence_probe(&inputs.base, &inputs.data.test)?;
    base_report.write_histogram_csv(&dir.join("base_histogram.csv"))?;
    write_wrong(&dir.join("base_wrong.csv"), &base_report)?;
    let mut rows = Vec::new();
    let ids = inputs.data.pool.iter().map(|e| e.id).collect();
    for &s in &cfg.repeat_seeds {
        let seeds = RunSeeds::from_repeat(s);
        let chosen: HashSet<u64> = random_selection(
            &ids,
            cfg.probe.train_size,
            seed::derive_path(seeds.select, &[seed::stream::PROBE]),
        )
        .into_iter()
        .collect();
        let train_set: Vec<Example> = inputs.data.pool.iter().filter(|e| chosen.contains(&e.id)).cloned().collect();
        let train_cfg = TrainConfig {
            epochs: cfg.probe.epochs,
            seed: seed::derive_path(seeds.train, &[seed::stream::PROBE]),
            ..cfg.train.clone()
        };
        let tuned = warmup(&inputs.base, &train_set, &train_cfg, seeds.model)
            .with_context(|| format!("overtraining adapters for seed {s}"))?;
        let report = confidence_probe(&tuned.snapshot, &inputs.data.test)?;
        report.write_histogram_csv(&dir.join(format!("tuned_seed_{s}_histogram.csv")))?;
        write_wrong(&dir.join(format!("tuned_seed_{s}_wrong.csv")), &report)?;
        rows.push(ConfidenceRow {
            seed: s,
            model: "base".into(),
            total: base_report.total,
            wrong: base_report.wrong.len(),
            mean_cf: base_report.mean_cf,
        });
        rows.push(ConfidenceRow {
            seed: s,
            model: "tuned".into(),
            total: report.total,
            wrong: report.wrong.len(),
            mean_cf: report.mean_cf,
        });
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Replays the persisted per-round pool scores of `probe.strategy` runs.
fn probe_correlation(cfg: &ExperimentConfig, force: bool) -> Result<Vec<CorrelationRow>> {
    let layout = cfg.layout();
    let kind = cfg.probe.strategy;
    ensure!(
        kind.flavor().is_some(),
        "the correlation probe needs a scoring strategy, not {}",
        kind.name()
    );
    let dirs: Vec<(u64, PathBuf)> = cfg.repeat_seeds.iter().map(|&s| (s, layout.run_dir(kind, s))).collect();
    for (_, run_dir) in &dirs {
        require(&run_dir.join("rounds.csv"), &format!("{} run", kind.name()), "run")?;
        require(&run_dir.join("base_scores.csv"), "base scores", "run")?;
    }
    let dir = layout.probe_dir("correlation");
    claim_dir(&dir, force)?;
    let mut rows = Vec::new();
    for (s, run_dir) in dirs {
        let base = read_base_scores(&run_dir.join("base_scores.csv"))?;
        let rounds = read_rounds(&run_dir.join("rounds.csv"))?;
        let per_round = rounds
            .iter()
            .map(|r| {
                let rel = r
                    .uncertainty_csv
                    .as_deref()
                    .with_context(|| format!("round {} of {} has no score file", r.round, run_dir.display()))?;
                Ok(read_records(&run_dir.join(rel))?)
            })
            .collect::<Result<Vec<_>>>()?;
        let table = ScoreTable::from_rounds(&base, &per_round)?;
        let rep = entropy_correlation(&table, cfg.probe.top_n, cfg.probe.correlation)
            .with_context(|| format!("correlation for seed {s}"))?;
        rep.write_matrix_csv(&dir.join(format!("seed_{s}_matrix.csv")))?;
        rep.write_scatter_csv(&dir.join(format!("seed_{s}_scatter.csv")))?;
        let k = rep.matrix.len();
        rows.push(CorrelationRow {
            seed: s,
            rounds: rounds.len(),
            examples: rep.ids.len(),
            corr_0_1: rep.get(0, 1),
            corr_5_6: (k > 6).then(|| rep.get(5, 6)),
        });
    }
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}
