use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use lora_al::active_loop::StrategyKind;
use lora_al_cli::commands::{self, ProbeKind};
use lora_al_cli::config::{parse_seeds, parse_strategies};
use lora_al_cli::{exit_code, ExperimentConfig};

const WORKERS_ENV: &str = "LORA_AL_WORKERS";

#[derive(Parser)]
#[command(name = "lora-al", version, about = "Active learning with low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replace existing outputs of this command.
    #[arg(long)]
    force: bool,
    /// Comma-separated repeat seeds, overriding `repeat_seeds`.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated strategy names, overriding `strategies`.
    #[arg(long)]
    strategies: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.repeat_seeds = parse_seeds(s)?;
        }
        if let Some(s) = &self.strategies {
            cfg.strategies = parse_strategies(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the reference config with every default.
    DefaultConfig,
    /// Write the pool, test, and pretraining sets.
    GenData(Common),
    /// Train the base model on the pretraining set.
    Pretrain(Common),
    /// Run active learning for every strategy and seed.
    Run(Common),
    /// Summarize runs into a table and merged curves.
    Report {
        #[command(flatten)]
        common: Common,
        /// Passive strategy the improvement is measured against.
        #[arg(long, default_value = "random")]
        baseline: String,
    },
    /// Confidence and score-correlation probes.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum, default_value = "all")]
        kind: ProbeKind,
    },
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    configure_workers()?;
    match cli.command {
        Command::DefaultConfig => println!("{}", ExperimentConfig::default().to_json()?),
        Command::GenData(c) => {
            let counts = commands::gen_data(&c.load()?, c.force)?;
            println!("pool {} test {} pretrain {}", counts.pool, counts.test, counts.pretrain);
        }
        Command::Pretrain(c) => {
            let s = commands::pretrain(&c.load()?, c.force)?;
            match s.final_loss {
                Some(l) => println!("{} steps, final loss {l:.6}", s.steps),
                None => println!("no pretraining steps"),
            }
            println!("base {} ({})", s.path.display(), s.fingerprint);
        }
        Command::Run(c) => {
            for r in commands::run(&c.load()?, c.force)? {
                let auc = r.auc.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
                println!("{} seed {}: AUC {auc} -> {}", r.strategy.name(), r.seed, r.dir.display());
            }
        }
        Command::Report { common, baseline } => {
            let baseline = StrategyKind::from_name(&baseline).with_context(|| format!("unknown baseline {baseline:?}"))?;
            let rows = commands::report(&common.load()?, baseline, common.force)?;
            println!("{:<10} {:>5} {:>8} {:>8}", "strategy", "seeds", "AUC", "RIPL");
            for r in rows {
                println!("{:<10} {:>5} {:>8.2} {:>8.2}", r.strategy, r.seeds, r.auc, r.ripl);
            }
        }
        Command::Probe { common, kind } => {
            let s = commands::probe(&common.load()?, kind, common.force)?;
            for r in &s.confidence {
                println!("confidence seed {} {}: {}/{} wrong, mean CF {:?}", r.seed, r.model, r.wrong, r.total, r.mean_cf);
            }
            for r in &s.correlation {
                println!("correlation seed {}: Iter0-Iter1 {:.4}, Iter5-Iter6 {:?}", r.seed, r.corr_0_1, r.corr_5_6);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
