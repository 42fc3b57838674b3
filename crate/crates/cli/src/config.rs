//! Experiment configuration and the on-disk layout it implies.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use lora_al::active_loop::{ALRunConfig, RunSeeds, Strategy, StrategyKind};
use lora_al::metrics::CorrelationKind;
use lora_al::model::ModelConfig;
use lora_al::tasks::{vocab, TaskFamily};
use lora_al::trainer::TrainConfig;
use lora_al::uncertainty::LambdaSchedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub pool_size: usize,
    pub test_size: usize,
    /// Disjoint corpus used only for base pretraining.
    pub pretrain_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlConfig {
    pub warm_start: usize,
    pub step_size: usize,
    pub budget: usize,
    #[serde(rename = "K")]
    pub mc_passes: usize,
    /// Linear over the number of rounds when absent.
    pub schedule: Option<LambdaSchedule>,
    pub eval_every_round: bool,
    pub reinit_adapters: bool,
    pub normalize_scores: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Pool examples the overtrained adapters see.
    pub train_size: usize,
    pub epochs: usize,
    pub top_n: usize,
    pub correlation: CorrelationKind,
    /// Runs whose persisted scores feed the correlation probe.
    pub strategy: StrategyKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskFamily,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub al: AlConfig,
    pub probe: ProbeConfig,
    pub strategies: Vec<StrategyKind>,
    pub repeat_seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            task: TaskFamily::BinaryParity {
                min_bits: 6,
                max_bits: 12,
            },
            data: DataConfig {
                seed: 0,
                pool_size: 2000,
                test_size: 600,
                pretrain_size: 2000,
            },
            model: ModelConfig::default(),
            pretrain: PretrainConfig {
                steps: 400,
                seed: 0,
                learning_rate: 1e-3,
                batch_size: 32,
            },
            train: TrainConfig::default(),
            al: AlConfig {
                warm_start: 50,
                step_size: 50,
                budget: 500,
                mc_passes: lora_al::active_loop::DEFAULT_MC_PASSES,
                schedule: None,
                eval_every_round: true,
                reinit_adapters: false,
                normalize_scores: false,
            },
            probe: ProbeConfig {
                train_size: 500,
                epochs: 15,
                top_n: 100,
                correlation: CorrelationKind::Pearson,
                strategy: StrategyKind::MaxEntropy,
            },
            strategies: vec![StrategyKind::Random, StrategyKind::MaxEntropy, StrategyKind::MaxEntropyStar],
            repeat_seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.task.validate()?;
        self.model.validate()?;
        ensure!(
            self.model.vocab_size == vocab::VOCAB_SIZE,
            "model.vocab_size must be {}",
            vocab::VOCAB_SIZE
        );
        ensure!(self.data.pool_size > 0 && self.data.test_size > 0, "pool and test sets must be non-empty");
        let wanted = (self.data.pool_size + self.data.test_size + self.data.pretrain_size) as u128;
        ensure!(
            wanted <= self.task.capacity(),
            "the task only has {} distinct prompts but data needs {wanted}",
            self.task.capacity()
        );
        ensure!(self.pretrain.batch_size > 0, "pretrain.batch_size must be at least 1");
        ensure!(
            self.pretrain.steps == 0 || self.data.pretrain_size > 0,
            "pretraining steps need a non-empty pretrain corpus"
        );
        self.train.validate()?;
        ensure!(!self.strategies.is_empty(), "at least one strategy is required");
        ensure!(!self.repeat_seeds.is_empty(), "at least one repeat seed is required");
        ensure!(
            self.strategies.iter().collect::<HashSet<_>>().len() == self.strategies.len(),
            "strategies must not repeat"
        );
        ensure!(
            self.repeat_seeds.iter().collect::<HashSet<_>>().len() == self.repeat_seeds.len(),
            "repeat_seeds must not repeat"
        );
        for &kind in &self.strategies {
            self.run_config(kind, 0).validate(self.data.pool_size)?;
        }
        ensure!(
            (1..=self.data.pool_size).contains(&self.probe.train_size),
            "probe.train_size must lie in 1..=pool_size"
        );
        ensure!(self.probe.epochs > 0 && self.probe.top_n > 0, "probe.epochs and probe.top_n must be positive");
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.output_dir)
    }

    pub fn rounds(&self) -> usize {
        self.al.budget.saturating_sub(self.al.warm_start) / self.al.step_size.max(1)
    }

    pub fn run_config(&self, kind: StrategyKind, repeat_seed: u64) -> ALRunConfig {
        let mut strategy = Strategy::new(kind, self.rounds());
        if let Some(schedule) = self.al.schedule {
            strategy.schedule = schedule;
        }
        strategy.mc_passes = self.al.mc_passes;
        ALRunConfig {
            warm_start: self.al.warm_start,
            step_size: self.al.step_size,
            budget: self.al.budget,
            strategy,
            seeds: RunSeeds::from_repeat(repeat_seed),
            train: self.train.clone(),
            eval_every_round: self.al.eval_every_round,
            reinit_adapters: self.al.reinit_adapters,
            normalize_scores: self.al.normalize_scores,
        }
    }
}

/// Parses `0,1,2`.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("invalid seed {s:?}")))
        .collect()
}

/// Parses `random,ME,ME_STAR`.
pub fn parse_strategies(list: &str) -> Result<Vec<StrategyKind>> {
    list.split(',')
        .map(|s| {
            StrategyKind::from_name(s.trim()).with_context(|| {
                let known: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown strategy {s:?}; expected one of {}", known.join(", "))
            })
        })
        .collect()
}

/// Paths under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pool(&self) -> PathBuf {
        self.data_dir().join("pool.jsonl")
    }

    pub fn test(&self) -> PathBuf {
        self.data_dir().join("test.jsonl")
    }

    pub fn pretrain_corpus(&self) -> PathBuf {
        self.data_dir().join("pretrain.jsonl")
    }

    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_snapshot(&self) -> PathBuf {
        self.base_dir().join("snapshot.json")
    }

    pub fn run_dir(&self, kind: StrategyKind, seed: u64) -> PathBuf {
        self.root.join("runs").join(kind.name()).join(format!("seed_{seed}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn probe_dir(&self, kind: &str) -> PathBuf {
        self.root.join("probe").join(kind)
    }
}
