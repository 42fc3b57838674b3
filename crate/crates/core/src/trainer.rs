//! Adam over the adapters with decoupled weight decay on the `B` factors
//! only, and the one-off pretraining of the base weights.

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_batch, register, DropoutMode, LoraAdapter, ModelSnapshot, Trainable};
use crate::numerics::{CeTarget, Tape, Tensor, Var};
use crate::seed;
use crate::tasks::{render_template, vocab, Example};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decay strength on `B`.
    pub b_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Applies the decay with the growing sign, `B <- B - lr (g - decay B)`.
    pub paper_sign: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            b_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 15,
            batch_size: 16,
            seed: 0,
            grad_clip: None,
            paper_sign: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.b_decay >= 0.0 && self.b_decay.is_finite()) {
            return Err(Error::config("b_decay must be non-negative"));
        }
        if self.learning_rate * self.b_decay >= 1.0 {
            return Err(Error::config("learning_rate * b_decay must stay below 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam moments, one pair per trainable tensor, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        OptimizerState { m, v, step: 0 }
    }

    /// Two entries per adapter: `A` then `B`.
    pub fn for_adapters(adapters: &[LoraAdapter]) -> Self {
        OptimizerState::new(adapters.iter().flat_map(|a| [a.a.len(), a.b.len()]))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }
}

fn check_grads(grads: &[Vec<f64>], names: &dyn Fn(usize) -> String) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at index {j}", names(i))));
        }
    }
    Ok(())
}

fn clip(grads: &mut [Vec<f64>], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// One Adam step over `params`. `decay[i]` selects decoupled shrinkage,
/// `p <- (1 - lr * decay) p - lr * direction`.
fn adam_apply(params: &mut [&mut Tensor], grads: &[Vec<f64>], decayed: &[bool], state: &mut OptimizerState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.adam_beta1.powi(t);
    let c2 = 1.0 - cfg.adam_beta2.powi(t);
    let lr = cfg.learning_rate;
    let decay = if cfg.paper_sign { -cfg.b_decay } else { cfg.b_decay };
    for (i, p) in params.iter_mut().enumerate() {
        let keep = if decayed[i] { 1.0 - lr * decay } else { 1.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            let direction = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            *w = keep * *w - lr * direction;
        }
    }
}

/// Adam on every adapter tensor plus decoupled decay on each `B`.
///
/// `grads` holds `A` then `B` per adapter, matching
/// [`OptimizerState::for_adapters`]. Nothing is modified when a gradient
/// is non-finite.
pub fn adam_step_hybrid(
    adapters: &mut [LoraAdapter],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != 2 * adapters.len() || state.m.len() != grads.len() {
        return Err(Error::contract("gradient and optimizer state must cover A and B of every adapter"));
    }
    for (i, g) in grads.iter().enumerate() {
        let ad = &adapters[i / 2];
        let want = if i % 2 == 0 { ad.a.len() } else { ad.b.len() };
        if g.len() != want || state.m[i].len() != want {
            return Err(Error::contract(format!("gradient {i} has the wrong size")));
        }
    }
    let names = |i: usize| {
        let t = adapters[i / 2].target;
        format!("{}.{:?}.{}", t.layer, t.matrix, if i.is_multiple_of(2) { "A" } else { "B" })
    };
    check_grads(grads, &names)?;
    let mut params: Vec<&mut Tensor> = adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
    let decayed: Vec<bool> = (0..params.len()).map(|i| i % 2 == 1).collect();
    adam_apply(&mut params, grads, &decayed, state, cfg);
    Ok(())
}

/// A training sequence: rendered prompt, gold answer, stop token. Loss
/// covers the answer and stop positions only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub tokens: Vec<vocab::Token>,
    /// Index in `tokens` of the first supervised token.
    pub answer_start: usize,
}

impl TrainItem {
    pub fn from_example(ex: &Example) -> Self {
        let mut tokens = render_template(ex);
        let answer_start = tokens.len();
        tokens.extend(&ex.gold);
        tokens.push(vocab::EOS);
        TrainItem { tokens, answer_start }
    }
}

/// Outcome of a training call.
#[derive(Clone, Debug)]
pub struct Trained {
    pub snapshot: ModelSnapshot,
    /// Mean answer-token cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Examples dropped for exceeding `max_seq_len`.
    pub skipped: usize,
    pub steps: u64,
}

fn usable_items(snap: &ModelSnapshot, data: &[Example]) -> (Vec<TrainItem>, usize) {
    let mut skipped = 0;
    let items = data
        .iter()
        .filter_map(|ex| {
            let item = TrainItem::from_example(ex);
            if item.tokens.len() > snap.config.max_seq_len {
                warn!(
                    "skipping example {}: {} tokens exceed max_seq_len {}",
                    ex.id,
                    item.tokens.len(),
                    snap.config.max_seq_len
                );
                skipped += 1;
                None
            } else {
                Some(item)
            }
        })
        .collect();
    (items, skipped)
}

/// Mean answer-token loss and its gradients for one batch.
fn batch_gradients(
    snap: &ModelSnapshot,
    batch: &[&TrainItem],
    dropout: &[DropoutMode],
    trainable: Trainable,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let with_adapters = trainable != Trainable::Base;
    let p = register(&mut tape, snap, trainable, with_adapters);
    let seqs: Vec<&[vocab::Token]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
    let logits = forward_batch(&mut tape, snap, &p, &seqs, dropout)?;
    let n_targets: usize = batch.iter().map(|i| i.tokens.len() - i.answer_start).sum();
    let weight = 1.0 / n_targets as f64;
    let mut targets = Vec::with_capacity(n_targets);
    let mut row = 0;
    for item in batch {
        for pos in item.answer_start..item.tokens.len() {
            targets.push(CeTarget {
                row: row + pos - 1,
                token: item.tokens[pos] as usize,
                weight,
            });
        }
        row += item.tokens.len();
    }
    let loss = tape.cross_entropy(logits, &targets)?;
    tape.backward(loss)?;
    let vars: Vec<Var> = match trainable {
        Trainable::Base => p.base_vars(),
        _ => p.adapters.iter().flat_map(|&(a, b)| [a, b]).collect(),
    };
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Runs seeded epochs of minibatch Adam. `step_limit` stops early.
fn run_epochs(
    snap: &ModelSnapshot,
    items: &[TrainItem],
    cfg: &TrainConfig,
    trainable: Trainable,
    step_limit: Option<u64>,
) -> Result<(ModelSnapshot, Vec<f64>, u64)> {
    let mut current = snap.clone();
    let mut state = match trainable {
        Trainable::Base => OptimizerState::new(current.base.tensors().iter().map(|t| t.len())),
        _ => OptimizerState::for_adapters(&current.adapters),
    };
    let mut epoch_losses = Vec::new();
    if items.is_empty() {
        return Ok((current, epoch_losses, 0));
    }
    let dropout_on = trainable != Trainable::Base;
    'epochs: for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_path(cfg.seed, &[seed::stream::SHUFFLE, epoch])));
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step_limit.is_some_and(|s| state.step >= s) {
                break 'epochs;
            }
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let dropout: Vec<DropoutMode> = (0..batch.len() as u64)
                .map(|j| {
                    if dropout_on {
                        DropoutMode::On(seed::derive_path(cfg.seed, &[seed::stream::DROPOUT, epoch, b as u64, j]))
                    } else {
                        DropoutMode::Off
                    }
                })
                .collect();
            let (loss, mut grads) = batch_gradients(&current, &batch, &dropout, trainable)?;
            total += loss * batch.len() as f64;
            count += batch.len();
            clip(&mut grads, cfg.grad_clip);
            match trainable {
                Trainable::Base => {
                    check_grads(&grads, &|i| format!("base tensor {i}"))?;
                    let mut params = current.base.tensors_mut();
                    let decayed = vec![false; params.len()];
                    adam_apply(&mut params, &grads, &decayed, &mut state, cfg);
                }
                _ => adam_step_hybrid(&mut current.adapters, &grads, &mut state, cfg)?,
            }
        }
        let mean = total / count as f64;
        debug!("epoch {epoch}: mean answer loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok((current, epoch_losses, state.step))
}

/// Continues training the adapters of `snap` on `labeled`. The base is
/// untouched and the returned snapshot's id is one higher.
pub fn train(snap: &ModelSnapshot, labeled: &[Example], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::contract("training needs at least one labeled example"));
    }
    let (items, skipped) = usable_items(snap, labeled);
    let (mut snapshot, epoch_losses, steps) = run_epochs(snap, &items, cfg, Trainable::Adapters, None)?;
    snapshot.snapshot_id = snap.snapshot_id + 1;
    Ok(Trained {
        snapshot,
        epoch_losses,
        skipped,
        steps,
    })
}

/// Trains freshly initialized adapters on the warm-start set.
pub fn warmup(base: &ModelSnapshot, initial: &[Example], cfg: &TrainConfig, adapter_seed: u64) -> Result<Trained> {
    train(&base.with_fresh_adapters(adapter_seed)?, initial, cfg)
}

/// Trains the base weights directly, adapters bypassed, for at most `steps`
/// optimizer steps. The result is a base snapshot with id 0.
pub fn pretrain_base(snap: &ModelSnapshot, corpus: &[Example], cfg: &TrainConfig, steps: u64) -> Result<Trained> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("pretraining needs a non-empty corpus"));
    }
    let (items, skipped) = usable_items(snap, corpus);
    let per_epoch = items.len().div_ceil(cfg.batch_size) as u64;
    let cfg = TrainConfig {
        epochs: steps.div_ceil(per_epoch.max(1)).max(1) as usize,
        b_decay: 0.0,
        ..cfg.clone()
    };
    let (mut snapshot, epoch_losses, steps) = run_epochs(snap, &items, &cfg, Trainable::Base, Some(steps))?;
    snapshot.snapshot_id = 0;
    snapshot.validate()?;
    Ok(Trained {
        snapshot,
        epoch_losses,
        skipped,
        steps,
    })
}

/// Mean answer-token cross-entropy over `data` in one batch, with its
/// gradient for every tensor `trainable` selects: `A` then `B` per adapter,
/// or the base tensors in [`BaseWeights::tensors`] order.
///
/// [`BaseWeights::tensors`]: crate::model::BaseWeights::tensors
pub fn loss_and_gradients(
    snap: &ModelSnapshot,
    data: &[Example],
    trainable: Trainable,
    dropout: DropoutMode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if trainable == Trainable::Nothing {
        return Err(Error::contract("nothing selected for differentiation"));
    }
    let (items, skipped) = usable_items(snap, data);
    if items.is_empty() || skipped > 0 {
        return Err(Error::contract("every example must fit the context"));
    }
    let batch: Vec<&TrainItem> = items.iter().collect();
    batch_gradients(snap, &batch, &vec![dropout; batch.len()], trainable)
}

/// Mean answer-token cross-entropy with dropout off.
pub fn answer_loss(snap: &ModelSnapshot, data: &[Example]) -> Result<f64> {
    let (items, _) = usable_items(snap, data);
    if items.is_empty() {
        return Err(Error::contract("no usable examples"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in items.chunks(64) {
        let batch: Vec<&TrainItem> = chunk.iter().collect();
        let pairs: Vec<(&[vocab::Token], &[vocab::Token])> = batch
            .iter()
            .map(|i| (&i.tokens[..i.answer_start], &i.tokens[i.answer_start..]))
            .collect();
        let modes = vec![DropoutMode::Off; pairs.len()];
        for lp in crate::model::sequence_logprobs_batch(snap, &pairs, &modes)? {
            total -= lp.iter().sum::<f64>();
            n += lp.len();
        }
    }
    Ok(total / n as f64)
}
