//! Acquisition scores: summed token entropy along the model's own greedy
//! response (ME), negative log-likelihood of the gold response (PE), their
//! MC-dropout averages, and the decreasing base/full mixing weight.
//!
//! Both scores are plain sums over response tokens, natural log, with no
//! length normalization, so longer responses score higher.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate_batch, sequence_logprobs_batch, Decode, DropoutMode, ModelSnapshot};
use crate::seed;
use crate::tasks::vocab::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flavor {
    #[serde(rename = "ME")]
    MaxEntropy,
    #[serde(rename = "PE")]
    PredictiveEntropy,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::MaxEntropy => "ME",
            Flavor::PredictiveEntropy => "PE",
        }
    }
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// One item to score. `golden` is required for PE and ignored for ME.
#[derive(Clone, Copy, Debug)]
pub struct ScoreInput<'a> {
    pub prompt: &'a [Token],
    pub golden: Option<&'a [Token]>,
}

/// Greedy decoding always produces at least one step, so every prompt gets
/// a finite score even when the first token is the stop token.
fn at_least_one_step(decode: &Decode) -> Decode {
    Decode {
        max_new: decode.max_new.max(1),
        ..decode.clone()
    }
}

/// ME for many prompts, one dropout mode each.
pub fn max_entropy_scores(
    snap: &ModelSnapshot,
    prompts: &[&[Token]],
    decode: &Decode,
    dropout: &[DropoutMode],
) -> Result<Vec<f64>> {
    let gens = generate_batch(snap, prompts, &at_least_one_step(decode), dropout)?;
    Ok(gens.iter().map(|g| g.step_probs.iter().map(|p| entropy(p)).sum()).collect())
}

/// `-sum_i sum_j p_ij ln p_ij` over the greedy response to `prompt`.
pub fn max_entropy_score(snap: &ModelSnapshot, prompt: &[Token], decode: &Decode, dropout: DropoutMode) -> Result<f64> {
    Ok(max_entropy_scores(snap, &[prompt], decode, &[dropout])?[0])
}

/// PE for many `(prompt, golden)` pairs, one dropout mode each.
pub fn predictive_entropy_scores(
    snap: &ModelSnapshot,
    items: &[(&[Token], &[Token])],
    dropout: &[DropoutMode],
) -> Result<Vec<f64>> {
    if items.iter().any(|(_, g)| g.is_empty()) {
        return Err(Error::contract("predictive entropy needs a non-empty gold response"));
    }
    let lps = sequence_logprobs_batch(snap, items, dropout)?;
    Ok(lps.iter().map(|lp| -lp.iter().sum::<f64>()).collect())
}

/// `-ln p(golden | prompt)`, dropout off.
pub fn predictive_entropy_score(snap: &ModelSnapshot, prompt: &[Token], golden: &[Token]) -> Result<f64> {
    Ok(predictive_entropy_scores(snap, &[(prompt, golden)], &[DropoutMode::Off])?[0])
}

/// Single-pass scores for a batch under the given dropout modes.
pub fn score_batch(
    snap: &ModelSnapshot,
    items: &[ScoreInput<'_>],
    flavor: Flavor,
    decode: &Decode,
    dropout: &[DropoutMode],
) -> Result<Vec<f64>> {
    match flavor {
        Flavor::MaxEntropy => {
            let prompts: Vec<&[Token]> = items.iter().map(|i| i.prompt).collect();
            max_entropy_scores(snap, &prompts, decode, dropout)
        }
        Flavor::PredictiveEntropy => {
            let pairs = items
                .iter()
                .map(|i| {
                    i.golden
                        .map(|g| (i.prompt, g))
                        .ok_or_else(|| Error::contract("predictive entropy requires a gold response"))
                })
                .collect::<Result<Vec<_>>>()?;
            predictive_entropy_scores(snap, &pairs, dropout)
        }
    }
}

/// MC-dropout means: item `i`, pass `k` in `1..=passes` runs with dropout
/// seeded by `derive(seeds[i], k)`. Passes are summed in order and divided
/// by `passes`, so the result does not depend on batching.
pub fn mc_score_batch(
    snap: &ModelSnapshot,
    items: &[ScoreInput<'_>],
    flavor: Flavor,
    decode: &Decode,
    passes: usize,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    if passes == 0 {
        return Err(Error::contract("MC dropout needs at least one pass"));
    }
    if seeds.len() != items.len() {
        return Err(Error::contract("one seed per item is required"));
    }
    let mut total = vec![0.0; items.len()];
    for k in 1..=passes as u64 {
        let modes: Vec<DropoutMode> = seeds.iter().map(|&s| DropoutMode::On(seed::derive(s, k))).collect();
        for (t, s) in total.iter_mut().zip(score_batch(snap, items, flavor, decode, &modes)?) {
            *t += s;
        }
    }
    Ok(total.into_iter().map(|t| t / passes as f64).collect())
}

/// Mean of `passes` dropout-on scores for one item.
pub fn mc_score(
    snap: &ModelSnapshot,
    item: ScoreInput<'_>,
    flavor: Flavor,
    decode: &Decode,
    passes: usize,
    seed: u64,
) -> Result<f64> {
    Ok(mc_score_batch(snap, &[item], flavor, decode, passes, &[seed])?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaKind {
    Linear,
    Exponential,
    Constant,
}

/// Weight on the base-model score as a function of the query round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub kind: LambdaKind,
    /// `T` in `1 - t / T`.
    pub horizon: usize,
    pub floor: f64,
    /// Per-round factor for the exponential kind.
    pub rate: f64,
}

impl LambdaSchedule {
    pub fn linear(horizon: usize) -> Self {
        LambdaSchedule {
            kind: LambdaKind::Linear,
            horizon,
            floor: 0.0,
            rate: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("lambda horizon must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::config("lambda floor must lie in [0, 1]"));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::config("lambda rate must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn value(&self, t: usize) -> f64 {
        match self.kind {
            LambdaKind::Linear => (1.0 - t as f64 / self.horizon as f64).max(self.floor),
            LambdaKind::Exponential => self.rate.powf(t as f64).max(self.floor),
            LambdaKind::Constant => self.floor,
        }
    }
}

pub fn lambda_value(schedule: &LambdaSchedule, t: usize) -> f64 {
    schedule.value(t)
}

/// `lambda * mu_b + (1 - lambda) * mu_f`.
pub fn mix(mu_b: f64, mu_f: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("mixing weight {lambda} outside [0, 1]")));
    }
    Ok(lambda * mu_b + (1.0 - lambda) * mu_f)
}

/// Standardizes in place to zero mean and unit variance; constant input
/// becomes all zeros.
pub fn zscore(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in values.iter_mut() {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
}

/// One scored pool example in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub round: usize,
    pub example_id: u64,
    pub flavor: Flavor,
    pub mu_b: f64,
    pub mu_f: f64,
    pub lambda: f64,
    pub mu: f64,
    #[serde(rename = "K")]
    pub k_passes: usize,
}

pub fn write_records(path: &Path, records: &[UncertaintyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<UncertaintyRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
