//! Cross-run summary: mean AUC per strategy and improvement over the
//! passive baseline, displayed on the percent scale.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{ensure, Result};
use serde::{Deserialize, Serialize};

use lora_al::active_loop::StrategyKind;
use lora_al::metrics::{ripl, LearningCurve};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub seeds: usize,
    /// Mean AUC ×100.
    pub auc: f64,
    /// Against the baseline's mean AUC, ×100.
    pub ripl: f64,
    /// Per-seed AUC ×100, space-separated.
    pub auc_per_seed: String,
}

/// One row per strategy in input order. AUCs are on `[0, 1]`.
pub fn summarize(aucs: &[(StrategyKind, Vec<f64>)], baseline: StrategyKind) -> Result<Vec<TableRow>> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base = aucs
        .iter()
        .find(|(k, _)| *k == baseline)
        .map(|(_, v)| v.as_slice())
        .filter(|v| !v.is_empty());
    let Some(base) = base else {
        anyhow::bail!("baseline {} has no runs", baseline.name());
    };
    let base_auc = mean(base);
    aucs.iter()
        .map(|(kind, values)| {
            ensure!(!values.is_empty(), "{} has no runs", kind.name());
            let m = mean(values);
            let per_seed: Vec<String> = values.iter().map(|a| (100.0 * a).to_string()).collect();
            Ok(TableRow {
                strategy: kind.name().to_string(),
                seeds: values.len(),
                auc: 100.0 * m,
                ripl: 100.0 * ripl(m, base_auc)?,
                auc_per_seed: per_seed.join(" "),
            })
        })
        .collect()
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Long format: `strategy,seed,budget,accuracy`, plus a `mean` row per
/// strategy and budget shared by all of its seeds.
pub fn write_curves(path: &Path, curves: &BTreeMap<StrategyKind, Vec<(u64, LearningCurve)>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "seed", "budget", "accuracy"])?;
    for (kind, runs) in curves {
        let mut by_budget: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (s, curve) in runs {
            for &(b, a) in curve.points() {
                w.write_record([kind.name().to_string(), s.to_string(), b.to_string(), a.to_string()])?;
                by_budget.entry(b).or_default().push(a);
            }
        }
        for (b, accs) in by_budget.iter().filter(|(_, a)| a.len() == runs.len()) {
            let m = accs.iter().sum::<f64>() / accs.len() as f64;
            w.write_record([kind.name().to_string(), "mean".into(), b.to_string(), m.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
