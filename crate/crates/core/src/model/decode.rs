use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward_batch, register, validate_tokens, DropoutMode, Trainable};
use super::ModelSnapshot;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax_rows, Tape, Tensor};
use crate::tasks::vocab::Token;

/// Sequences per tape in batched inference. Fixed so results never depend
/// on how work is spread across threads.
const CHUNK: usize = 64;

/// Greedy decoding settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decode {
    pub max_new: usize,
    pub stop_token: Token,
    /// When set, the argmax is taken over these tokens only. The reported
    /// step distributions are always over the full vocabulary.
    pub allowed: Option<Vec<Token>>,
}

/// One greedy continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens, including the stop token when it was produced.
    pub tokens: Vec<Token>,
    /// Full next-token distribution at each generated step.
    pub step_probs: Vec<Vec<f64>>,
}

impl Generation {
    /// Generated tokens without a trailing stop token.
    pub fn answer(&self, stop_token: Token) -> &[Token] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == stop_token => rest,
            _ => &self.tokens,
        }
    }
}

/// Logits for every position of one sequence: row `i` predicts token `i + 1`.
pub fn forward_logits(snap: &ModelSnapshot, tokens: &[Token], dropout: DropoutMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = register(&mut tape, snap, Trainable::Nothing, true);
    let out = forward_batch(&mut tape, snap, &p, &[tokens], &[dropout])?;
    Ok(tape.value(out).clone())
}

/// Logits of the raw base network with the adapter path removed.
pub fn forward_logits_base(snap: &ModelSnapshot, tokens: &[Token]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = register(&mut tape, snap, Trainable::Nothing, false);
    let out = forward_batch(&mut tape, snap, &p, &[tokens], &[DropoutMode::Off])?;
    Ok(tape.value(out).clone())
}

fn argmax(probs: &[f64], allowed: Option<&[Token]>) -> Token {
    let mut best: Option<(Token, f64)> = None;
    let mut consider = |t: Token| {
        let p = probs[t as usize];
        // Strict comparison over ascending ids keeps the lowest id on ties.
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((t, p));
        }
    };
    match allowed {
        Some(set) => {
            let mut sorted = set.to_vec();
            sorted.sort_unstable();
            sorted.into_iter().for_each(&mut consider);
        }
        None => (0..probs.len() as Token).for_each(consider),
    }
    best.map_or(0, |(t, _)| t)
}

fn generate_chunk(
    snap: &ModelSnapshot,
    prompts: &[&[Token]],
    decode: &Decode,
    dropout: &[DropoutMode],
) -> Result<Vec<Generation>> {
    let mut gens: Vec<Generation> = prompts
        .iter()
        .map(|_| Generation {
            tokens: Vec::new(),
            step_probs: Vec::new(),
        })
        .collect();
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..decode.max_new {
        if active.is_empty() {
            break;
        }
        let seqs: Vec<Vec<Token>> = active
            .iter()
            .map(|&i| prompts[i].iter().chain(&gens[i].tokens).copied().collect())
            .collect();
        let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
        let modes: Vec<DropoutMode> = active.iter().map(|&i| dropout[i]).collect();
        let mut tape = Tape::new();
        let p = register(&mut tape, snap, Trainable::Nothing, true);
        let logits = forward_batch(&mut tape, snap, &p, &refs, &modes)?;
        let logits = tape.value(logits);
        let mut row_end = 0;
        let mut still = Vec::with_capacity(active.len());
        for (&i, s) in active.iter().zip(&seqs) {
            row_end += s.len();
            let last = Tensor::new(vec![1, logits.cols()], logits.row(row_end - 1).to_vec())?;
            let probs = softmax_rows(&last)?.into_data();
            let tok = argmax(&probs, decode.allowed.as_deref());
            gens[i].tokens.push(tok);
            gens[i].step_probs.push(probs);
            if tok != decode.stop_token {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(gens)
}

/// Greedy continuation for many prompts, each with its own dropout mode.
pub fn generate_batch(
    snap: &ModelSnapshot,
    prompts: &[&[Token]],
    decode: &Decode,
    dropout: &[DropoutMode],
) -> Result<Vec<Generation>> {
    if prompts.len() != dropout.len() {
        return Err(Error::contract("one dropout mode per prompt is required"));
    }
    for p in prompts {
        validate_tokens(snap, p)?;
        if p.len() + decode.max_new > snap.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: p.len() + decode.max_new,
                max_seq_len: snap.config.max_seq_len,
            });
        }
        if p.is_empty() {
            return Err(Error::contract("cannot generate from an empty prompt"));
        }
    }
    let chunks: Vec<Result<Vec<Generation>>> = prompts
        .par_chunks(CHUNK)
        .zip(dropout.par_chunks(CHUNK))
        .map(|(p, d)| generate_chunk(snap, p, decode, d))
        .collect();
    let mut out = Vec::with_capacity(prompts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn generate(snap: &ModelSnapshot, prompt: &[Token], decode: &Decode, dropout: DropoutMode) -> Result<Generation> {
    Ok(generate_batch(snap, &[prompt], decode, &[dropout])?.remove(0))
}

/// Argmax continuation; ties go to the lowest token id. The stop token is
/// included in the output when produced.
pub fn generate_greedy(snap: &ModelSnapshot, prompt: &[Token], max_new: usize, stop_token: Token) -> Result<Vec<Token>> {
    let decode = Decode {
        max_new,
        stop_token,
        allowed: None,
    };
    Ok(generate(snap, prompt, &decode, DropoutMode::Off)?.tokens)
}

fn logprobs_chunk(
    snap: &ModelSnapshot,
    items: &[(&[Token], &[Token])],
    dropout: &[DropoutMode],
) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<Vec<Token>> = items
        .iter()
        .map(|(p, r)| p.iter().chain(r.iter()).copied().collect())
        .collect();
    let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let params = register(&mut tape, snap, Trainable::Nothing, true);
    let logits = forward_batch(&mut tape, snap, &params, &refs, dropout)?;
    let logits = tape.value(logits);
    let mut start = 0;
    let mut out = Vec::with_capacity(items.len());
    for (p, r) in items {
        let lp = (0..r.len())
            .map(|i| log_softmax(logits.row(start + p.len() - 1 + i))[r[i] as usize])
            .collect();
        out.push(lp);
        start += p.len() + r.len();
    }
    Ok(out)
}

/// `log p(response_i | prompt, response_<i)` for many pairs.
pub fn sequence_logprobs_batch(
    snap: &ModelSnapshot,
    items: &[(&[Token], &[Token])],
    dropout: &[DropoutMode],
) -> Result<Vec<Vec<f64>>> {
    if items.len() != dropout.len() {
        return Err(Error::contract("one dropout mode per item is required"));
    }
    for (p, r) in items {
        if p.is_empty() {
            return Err(Error::contract("prompt must be non-empty"));
        }
        validate_tokens(snap, r)?;
        validate_tokens(snap, p)?;
        if p.len() + r.len() > snap.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: p.len() + r.len(),
                max_seq_len: snap.config.max_seq_len,
            });
        }
    }
    let chunks: Vec<Result<Vec<Vec<f64>>>> = items
        .par_chunks(CHUNK)
        .zip(dropout.par_chunks(CHUNK))
        .map(|(it, d)| logprobs_chunk(snap, it, d))
        .collect();
    let mut out = Vec::with_capacity(items.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `log p(response_i | prompt, response_<i)`, dropout off. Empty response
/// gives an empty list.
pub fn sequence_logprobs(snap: &ModelSnapshot, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Ok(Vec::new());
    }
    Ok(sequence_logprobs_batch(snap, &[(prompt, response)], &[DropoutMode::Off])?.remove(0))
}
