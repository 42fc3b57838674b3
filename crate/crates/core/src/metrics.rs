//! Accuracy, learning-curve area, relative improvement over passive
//! learning, and the two probes: confidence on wrong binary predictions and
//! cross-round correlation of pool entropies.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate_batch, Decode, DropoutMode, ModelSnapshot};
use crate::tasks::{render_template, vocab, Example, TaskFamily, TaskKind};
use crate::uncertainty::UncertaintyRecord;

/// Greedy decoding restricted to the family's answer alphabet.
pub fn answer_decode(family: &TaskFamily) -> Decode {
    let max_new = match family {
        TaskFamily::ModArith { .. } => family.max_answer_len() + 1,
        _ => 1,
    };
    Decode {
        max_new,
        stop_token: vocab::EOS,
        allowed: Some(family.answer_alphabet()),
    }
}

/// Greedy answers, dropout off, stop token stripped.
pub fn predictions(snap: &ModelSnapshot, data: &[Example], decode: &Decode) -> Result<Vec<Vec<vocab::Token>>> {
    let prompts: Vec<Vec<vocab::Token>> = data.iter().map(render_template).collect();
    let refs: Vec<&[vocab::Token]> = prompts.iter().map(Vec::as_slice).collect();
    let gens = generate_batch(snap, &refs, decode, &vec![DropoutMode::Off; refs.len()])?;
    Ok(gens.iter().map(|g| g.answer(decode.stop_token).to_vec()).collect())
}

/// Fraction of exact-match greedy answers.
pub fn accuracy(snap: &ModelSnapshot, test: &[Example], decode: &Decode) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("accuracy needs a non-empty test set"));
    }
    let preds = predictions(snap, test, decode)?;
    let hits = preds.iter().zip(test).filter(|(p, ex)| **p == ex.gold).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Accuracy against the number of labeled examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    points: Vec<(usize, f64)>,
}

impl LearningCurve {
    /// Budgets must be strictly increasing and accuracies in `[0, 1]`.
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("a learning curve needs at least one point"));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::contract("learning-curve budgets must be strictly increasing"));
        }
        if points.iter().any(|&(_, a)| !(0.0..=1.0).contains(&a)) {
            return Err(Error::contract("accuracy outside [0, 1]"));
        }
        Ok(LearningCurve { points })
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["budget", "accuracy"])?;
        for (b, a) in &self.points {
            w.write_record([b.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let points = r.deserialize().collect::<std::result::Result<Vec<(usize, f64)>, _>>()?;
        LearningCurve::new(points)
    }
}

/// Trapezoidal area over the budget axis divided by the budget span.
pub fn auc(curve: &LearningCurve) -> Result<f64> {
    let p = curve.points();
    if p.len() < 2 {
        return Err(Error::contract("area under a single-point curve is undefined"));
    }
    let area: f64 = p
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0) as f64)
        .sum();
    Ok(area / (p[p.len() - 1].0 - p[0].0) as f64)
}

/// `(auc_al - auc_pl) / (1 - auc_pl)`.
pub fn ripl(auc_al: f64, auc_pl: f64) -> Result<f64> {
    if auc_pl >= 1.0 {
        return Err(Error::contract("passive-learning AUC of 1 leaves no room for improvement"));
    }
    Ok((auc_al - auc_pl) / (1.0 - auc_pl))
}

pub const CONFIDENCE_BINS: usize = 20;

/// Confidence on misclassified binary questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub total: usize,
    /// `(example_id, cf)` for every wrong prediction.
    pub wrong: Vec<(u64, f64)>,
    /// Counts over [`CONFIDENCE_BINS`] equal bins on `[0.5, 1.0]`.
    pub histogram: Vec<usize>,
    /// `None` when nothing was misclassified.
    pub mean_cf: Option<f64>,
}

impl ConfidenceReport {
    pub fn bin_edges(i: usize) -> (f64, f64) {
        let w = 0.5 / CONFIDENCE_BINS as f64;
        (0.5 + w * i as f64, 0.5 + w * (i + 1) as f64)
    }

    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (i, c) in self.histogram.iter().enumerate() {
            let (lo, hi) = ConfidenceReport::bin_edges(i);
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cf_bin(cf: f64) -> usize {
    let i = ((cf - 0.5) / 0.5 * CONFIDENCE_BINS as f64).floor();
    (i.max(0.0) as usize).min(CONFIDENCE_BINS - 1)
}

/// First-step probability mass renormalized over `true`/`false`; the
/// prediction is the larger share (ties go to `true`) and `cf` its share.
pub fn confidence_probe(snap: &ModelSnapshot, test: &[Example]) -> Result<ConfidenceReport> {
    if let Some(ex) = test.iter().find(|e| e.task != TaskKind::BinaryParity) {
        return Err(Error::contract(format!(
            "confidence probe needs a two-answer task, got {}",
            ex.task.name()
        )));
    }
    let decode = Decode {
        max_new: 1,
        stop_token: vocab::EOS,
        allowed: None,
    };
    let prompts: Vec<Vec<vocab::Token>> = test.iter().map(render_template).collect();
    let refs: Vec<&[vocab::Token]> = prompts.iter().map(Vec::as_slice).collect();
    let gens = generate_batch(snap, &refs, &decode, &vec![DropoutMode::Off; refs.len()])?;
    let mut wrong = Vec::new();
    let mut histogram = vec![0; CONFIDENCE_BINS];
    for (ex, g) in test.iter().zip(&gens) {
        let p = &g.step_probs[0];
        let (pt, pf) = (p[vocab::TRUE as usize], p[vocab::FALSE as usize]);
        let share_true = pt / (pt + pf);
        let (pred, cf) = if share_true >= 0.5 {
            (vocab::TRUE, share_true)
        } else {
            (vocab::FALSE, 1.0 - share_true)
        };
        if ex.gold != [pred] {
            histogram[cf_bin(cf)] += 1;
            wrong.push((ex.id, cf));
        }
    }
    let mean_cf = (!wrong.is_empty()).then(|| wrong.iter().map(|w| w.1).sum::<f64>() / wrong.len() as f64);
    Ok(ConfidenceReport {
        total: test.len(),
        wrong,
        histogram,
        mean_cf,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    #[default]
    Pearson,
    Spearman,
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Per-round scores over a fixed example set; row 0 is the base model.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
}

impl ScoreTable {
    /// Row 0 from `base`, then one row per round from `mu_f`, over the ids
    /// scored in every round.
    pub fn from_rounds(base: &BTreeMap<u64, f64>, rounds: &[Vec<UncertaintyRecord>]) -> Result<Self> {
        let per_round: Vec<BTreeMap<u64, f64>> = rounds
            .iter()
            .map(|r| r.iter().map(|u| (u.example_id, u.mu_f)).collect())
            .collect();
        let ids: Vec<u64> = base
            .keys()
            .copied()
            .filter(|id| per_round.iter().all(|r| r.contains_key(id)))
            .collect();
        let mut rows = vec![ids.iter().map(|id| base[id]).collect::<Vec<_>>()];
        for r in &per_round {
            rows.push(ids.iter().map(|id| r[id]).collect());
        }
        Ok(ScoreTable { ids, rows })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPair {
    pub rows: (usize, usize),
    /// `(example_id, x, y)`
    pub points: Vec<(u64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub kind: CorrelationKind,
    /// Columns kept: the top examples by row-0 score.
    pub ids: Vec<u64>,
    pub matrix: Vec<Vec<f64>>,
    pub scatters: Vec<ScatterPair>,
}

impl CorrelationReport {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.matrix[a][b]
    }

    /// Square matrix with `Iter{t}` labels on both axes.
    pub fn write_matrix_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let labels: Vec<String> = (0..self.matrix.len()).map(|i| format!("Iter{i}")).collect();
        let mut header = vec![String::from("row")];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in labels.iter().zip(&self.matrix) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["pair", "example_id", "x", "y"])?;
        for s in &self.scatters {
            let pair = format!("Iter{}-Iter{}", s.rows.0, s.rows.1);
            for (id, x, y) in &s.points {
                w.write_record([pair.clone(), id.to_string(), x.to_string(), y.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Correlations between every pair of rows over the `top_n` examples with
/// the highest row-0 score (ties by ascending id).
pub fn entropy_correlation(table: &ScoreTable, top_n: usize, kind: CorrelationKind) -> Result<CorrelationReport> {
    if table.rows.len() < 2 {
        return Err(Error::contract("entropy correlation needs at least two rounds"));
    }
    let width = table.ids.len();
    if table.rows.iter().any(|r| r.len() != width) {
        return Err(Error::contract("score rows must all cover the same examples"));
    }
    let n = if top_n > width {
        warn!("top_n {top_n} exceeds the {width} scored examples; using all of them");
        width
    } else {
        top_n
    };
    let mut cols: Vec<usize> = (0..width).collect();
    cols.sort_by(|&a, &b| table.rows[0][b].total_cmp(&table.rows[0][a]).then(table.ids[a].cmp(&table.ids[b])));
    cols.truncate(n);
    let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
    let corr = |x: &[f64], y: &[f64]| match kind {
        CorrelationKind::Pearson => pearson(x, y),
        CorrelationKind::Spearman => spearman(x, y),
    };
    let k = rows.len();
    let mut matrix = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let c = corr(&rows[a], &rows[b]);
            matrix[a][b] = c;
            matrix[b][a] = c;
        }
    }
    let ids: Vec<u64> = cols.iter().map(|&c| table.ids[c]).collect();
    let scatters = [(0, 1), (5, 6)]
        .into_iter()
        .filter(|&(_, b)| b < k)
        .map(|(a, b)| ScatterPair {
            rows: (a, b),
            points: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, rows[a][i], rows[b][i]))
                .collect(),
        })
        .collect();
    Ok(CorrelationReport {
        kind,
        ids,
        matrix,
        scatters,
    })
}
