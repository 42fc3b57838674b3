use std::ops::Range;

use rand::Rng;

use super::{MatrixKind, ModelSnapshot};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::seed;
use crate::tasks::vocab::Token;

/// Dropout on the adapter inputs for one sequence.
///
/// `On(seed)` draws masks from a stream keyed by `(seed, adapter, position)`,
/// so a prefix sees the same masks however long the sequence grows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    On(u64),
}

/// Which leaves receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Adapters,
    Base,
}

pub(crate) struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    matrices: [Var; 6],
}

/// Tape handles for every snapshot tensor.
pub(crate) struct ParamVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_ln_gain: Var,
    pub final_ln_bias: Var,
    /// `(A, B)` per adapter; empty when the adapter path is skipped.
    pub adapters: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Base tensors in [`super::BaseWeights::tensors`] order.
    pub fn base_vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend([l.ln1_gain, l.ln1_bias]);
            out.extend(&l.matrices[..4]);
            out.extend([l.ln2_gain, l.ln2_bias]);
            out.extend(&l.matrices[4..]);
        }
        out.push(self.final_ln_gain);
        out.push(self.final_ln_bias);
        out
    }
}

/// Places the snapshot on the tape. With `with_adapters` false the model is
/// the raw base network.
pub(crate) fn register<'a>(
    tape: &mut Tape<'a>,
    snap: &'a ModelSnapshot,
    trainable: Trainable,
    with_adapters: bool,
) -> ParamVars {
    let base_leaf = |tape: &mut Tape<'a>, t: &'a Tensor| {
        if trainable == Trainable::Base {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    };
    let b = &snap.base;
    let token_embedding = base_leaf(tape, &b.token_embedding);
    let position_embedding = base_leaf(tape, &b.position_embedding);
    let layers = b
        .layers
        .iter()
        .map(|l| LayerVars {
            ln1_gain: base_leaf(tape, &l.ln1_gain),
            ln1_bias: base_leaf(tape, &l.ln1_bias),
            matrices: MatrixKind::ALL.map(|k| base_leaf(tape, l.matrix(k))),
            ln2_gain: base_leaf(tape, &l.ln2_gain),
            ln2_bias: base_leaf(tape, &l.ln2_bias),
        })
        .collect();
    let final_ln_gain = base_leaf(tape, &b.final_ln_gain);
    let final_ln_bias = base_leaf(tape, &b.final_ln_bias);
    let adapters = if with_adapters {
        snap.adapters
            .iter()
            .map(|ad| {
                if trainable == Trainable::Adapters {
                    (tape.param(&ad.a), tape.param(&ad.b))
                } else {
                    (tape.constant(&ad.a), tape.constant(&ad.b))
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    ParamVars {
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain,
        final_ln_bias,
        adapters,
    }
}

pub(crate) fn validate_tokens(snap: &ModelSnapshot, tokens: &[Token]) -> Result<()> {
    let c = &snap.config;
    if tokens.len() > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_seq_len: c.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: c.vocab_size,
        });
    }
    Ok(())
}

/// Inverted-dropout mask for one adapter input, `[rows x width]`.
fn dropout_mask(
    segments: &[Range<usize>],
    dropout: &[DropoutMode],
    adapter: usize,
    width: usize,
    p: f64,
) -> Tensor {
    let rows = segments.last().map_or(0, |s| s.end);
    let mut mask = vec![1.0; rows * width];
    let keep_scale = 1.0 / (1.0 - p);
    for (seg, mode) in segments.iter().zip(dropout) {
        let DropoutMode::On(s) = *mode else { continue };
        for (pos, row) in seg.clone().enumerate() {
            let mut rng = seed::rng(seed::derive_path(s, &[seed::stream::DROPOUT, adapter as u64, pos as u64]));
            for m in &mut mask[row * width..(row + 1) * width] {
                *m = if rng.random::<f64>() < p { 0.0 } else { keep_scale };
            }
        }
    }
    Tensor::new(vec![rows, width], mask).expect("sized")
}

struct Ctx<'s> {
    snap: &'s ModelSnapshot,
    segments: Vec<Range<usize>>,
    dropout: &'s [DropoutMode],
    any_dropout: bool,
}

impl Ctx<'_> {
    /// `x W^T`, plus the adapter path when registered.
    fn linear(&self, tape: &mut Tape<'_>, p: &ParamVars, x: Var, layer: usize, kind: MatrixKind) -> Result<Var> {
        let w = p.layers[layer].matrices[kind as usize];
        let base = tape.matmul_nt(x, w)?;
        if p.adapters.is_empty() {
            return Ok(base);
        }
        let idx = layer * MatrixKind::ALL.len() + kind as usize;
        let adapter = &self.snap.adapters[idx];
        let (a, b) = p.adapters[idx];
        let input = if self.any_dropout && adapter.dropout > 0.0 {
            let width = tape.value(x).cols();
            let mask = dropout_mask(&self.segments, self.dropout, idx, width, adapter.dropout);
            let m = tape.constant_owned(mask);
            tape.mul(x, m)?
        } else {
            x
        };
        let low = tape.matmul_nt(input, a)?;
        let up = tape.matmul_nt(low, b)?;
        let scaled = tape.scale(up, adapter.scale());
        tape.add(base, scaled)
    }
}

/// Logits `[sum(len) x V]` for a batch of sequences stacked row-wise.
/// Row `i` of a sequence predicts its token `i + 1`.
pub(crate) fn forward_batch(
    tape: &mut Tape<'_>,
    snap: &ModelSnapshot,
    p: &ParamVars,
    seqs: &[&[Token]],
    dropout: &[DropoutMode],
) -> Result<Var> {
    if seqs.len() != dropout.len() {
        return Err(Error::contract("one dropout mode per sequence is required"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        validate_tokens(snap, s)?;
        let start = ids.len();
        ids.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
        segments.push(start..ids.len());
    }
    let ctx = Ctx {
        snap,
        segments,
        dropout,
        any_dropout: dropout.iter().any(|d| matches!(d, DropoutMode::On(_))),
    };

    let tok = tape.embedding(p.token_embedding, &ids)?;
    let pos = tape.embedding(p.position_embedding, &positions)?;
    let mut h = tape.add(tok, pos)?;
    for (l, lv) in p.layers.iter().enumerate() {
        let a = tape.layer_norm(h, lv.ln1_gain, lv.ln1_bias)?;
        let q = ctx.linear(tape, p, a, l, MatrixKind::Query)?;
        let k = ctx.linear(tape, p, a, l, MatrixKind::Key)?;
        let v = ctx.linear(tape, p, a, l, MatrixKind::Value)?;
        let att = tape.causal_attention(q, k, v, snap.config.n_heads, &ctx.segments)?;
        let o = ctx.linear(tape, p, att, l, MatrixKind::Output)?;
        h = tape.add(h, o)?;
        let b = tape.layer_norm(h, lv.ln2_gain, lv.ln2_bias)?;
        let up = ctx.linear(tape, p, b, l, MatrixKind::FfnUp)?;
        let act = tape.gelu(up);
        let down = ctx.linear(tape, p, act, l, MatrixKind::FfnDown)?;
        h = tape.add(h, down)?;
    }
    let hf = tape.layer_norm(h, p.final_ln_gain, p.final_ln_bias)?;
    tape.matmul_nt(hf, p.token_embedding)
}
