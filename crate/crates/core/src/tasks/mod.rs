//! Synthetic tasks with closed-form answers, the question template, the
//! labeling oracle, and JSONL dataset files.
//!
//! Three families cover the answer formats the method cares about:
//! `binary_parity` answers with one boolean token, `mcq4` with one letter,
//! and `mod_arith` with a multi-token number.

pub mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use vocab::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryParity,
    ModArith,
    Mcq4,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::BinaryParity => "binary_parity",
            TaskKind::ModArith => "mod_arith",
            TaskKind::Mcq4 => "mcq4",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [TaskKind::BinaryParity, TaskKind::ModArith, TaskKind::Mcq4]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

/// Family and size parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskFamily {
    /// Bit strings with lengths in `min_bits..=max_bits`.
    BinaryParity { min_bits: usize, max_bits: usize },
    /// `a + b mod p` with `a, b < p`.
    ModArith { modulus: u32 },
    /// Four candidate numbers in `0..=max_value`, one satisfying the predicate.
    Mcq4 { max_value: u32 },
}

impl TaskFamily {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskFamily::BinaryParity { .. } => TaskKind::BinaryParity,
            TaskFamily::ModArith { .. } => TaskKind::ModArith,
            TaskFamily::Mcq4 { .. } => TaskKind::Mcq4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskFamily::BinaryParity { min_bits, max_bits } => {
                if min_bits == 0 || min_bits > max_bits || max_bits > 60 {
                    return Err(Error::config(format!("bad bit range {min_bits}..={max_bits}")));
                }
            }
            TaskFamily::ModArith { modulus } => {
                if !(2..=9999).contains(&modulus) {
                    return Err(Error::config(format!("modulus {modulus} outside 2..=9999")));
                }
            }
            TaskFamily::Mcq4 { max_value } => {
                if !(7..=9999).contains(&max_value) {
                    return Err(Error::config(format!("max_value {max_value} outside 7..=9999")));
                }
            }
        }
        Ok(())
    }

    /// Number of distinct prompts the family can produce.
    pub fn capacity(&self) -> u128 {
        match *self {
            TaskFamily::BinaryParity { min_bits, max_bits } => (min_bits..=max_bits).map(|l| 1u128 << l).sum(),
            TaskFamily::ModArith { modulus } => u128::from(modulus) * u128::from(modulus),
            // Four predicates over ordered 4-tuples; a loose but safe bound.
            TaskFamily::Mcq4 { max_value } => {
                let n = u128::from(max_value) + 1;
                n * (n - 1) * (n - 2) * (n - 3) / 6
            }
        }
    }

    /// Longest answer in tokens (without the stop token).
    pub fn max_answer_len(&self) -> usize {
        match *self {
            TaskFamily::ModArith { modulus } => (modulus - 1).to_string().len(),
            _ => 1,
        }
    }

    /// Tokens a well-formed answer may use, including the stop token when
    /// answers have variable length.
    pub fn answer_alphabet(&self) -> Vec<Token> {
        match self {
            TaskFamily::BinaryParity { .. } => vec![vocab::TRUE, vocab::FALSE],
            TaskFamily::Mcq4 { .. } => (0..4).map(vocab::letter).collect(),
            TaskFamily::ModArith { .. } => (0..10).map(vocab::digit).chain([vocab::EOS]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub family: TaskFamily,
    pub count: usize,
    pub seed: u64,
}

/// A question with its gold answer segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub prompt: Vec<Token>,
    pub gold: Vec<Token>,
    pub task: TaskKind,
    pub meta: BTreeMap<String, String>,
}

/// Question tokens followed by the answer separator.
pub fn render_template(example: &Example) -> Vec<Token> {
    render_prompt(&example.prompt)
}

pub fn render_prompt(prompt: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(prompt.len() + 1);
    out.extend_from_slice(prompt);
    out.push(vocab::ANS);
    out
}

/// Inverse of [`render_template`]; `None` if the separator is missing.
pub fn strip_template(rendered: &[Token]) -> Option<&[Token]> {
    rendered.strip_suffix(&[vocab::ANS])
}

pub fn generate(spec: &TaskSpec) -> Result<Vec<Example>> {
    generate_excluding(spec, 0, &HashSet::new())
}

/// Draws `spec.count` examples with ids from `first_id`, skipping any prompt
/// in `exclude`. Deterministic in `spec`.
pub fn generate_excluding(spec: &TaskSpec, first_id: u64, exclude: &HashSet<Vec<Token>>) -> Result<Vec<Example>> {
    spec.family.validate()?;
    let capacity = spec.family.capacity();
    let available = capacity.saturating_sub(exclude.len() as u128);
    if spec.count as u128 > available {
        return Err(Error::CapacityExceeded {
            requested: spec.count,
            capacity: available,
        });
    }
    let mut rng = seed::rng(seed::derive(spec.seed, seed::stream::TASK));
    let mut seen: HashSet<Vec<Token>> = HashSet::with_capacity(spec.count);
    let mut out = Vec::with_capacity(spec.count);
    let max_attempts = 1000 * spec.count as u64 + 100_000;
    let mut attempts = 0u64;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::CapacityExceeded {
                requested: spec.count,
                capacity: out.len() as u128,
            });
        }
        let (prompt, gold, meta) = draw(&spec.family, &mut rng);
        if exclude.contains(&prompt) || !seen.insert(prompt.clone()) {
            continue;
        }
        out.push(Example {
            id: first_id + out.len() as u64,
            prompt,
            gold,
            task: spec.family.kind(),
            meta,
        });
    }
    Ok(out)
}

fn draw(family: &TaskFamily, rng: &mut impl Rng) -> (Vec<Token>, Vec<Token>, BTreeMap<String, String>) {
    let mut meta = BTreeMap::new();
    match *family {
        TaskFamily::BinaryParity { min_bits, .. } => {
            // Uniform over all strings in the length range.
            let mut idx = rng.random_range(0..family.capacity());
            let mut len = min_bits;
            while idx >= 1u128 << len {
                idx -= 1u128 << len;
                len += 1;
            }
            let bits: Vec<u32> = (0..len).map(|i| ((idx >> (len - 1 - i)) & 1) as u32).collect();
            let ones = bits.iter().filter(|&&b| b == 1).count();
            meta.insert("ones".into(), ones.to_string());
            let gold = if ones % 2 == 0 { vocab::TRUE } else { vocab::FALSE };
            (bits.into_iter().map(vocab::digit).collect(), vec![gold], meta)
        }
        TaskFamily::ModArith { modulus } => {
            let a = rng.random_range(0..modulus);
            let b = rng.random_range(0..modulus);
            let sum = (a + b) % modulus;
            meta.insert("a".into(), a.to_string());
            meta.insert("b".into(), b.to_string());
            meta.insert("p".into(), modulus.to_string());
            let mut prompt = vocab::number(a, 1);
            prompt.push(vocab::PLUS);
            prompt.extend(vocab::number(b, 1));
            prompt.push(vocab::MOD);
            prompt.extend(vocab::number(modulus, 1));
            (prompt, vocab::number(sum, 1), meta)
        }
        TaskFamily::Mcq4 { max_value } => {
            let width = max_value.to_string().len();
            let predicate = [vocab::MAX, vocab::MIN, vocab::EVEN, vocab::ODD][rng.random_range(0..4)];
            let mut values = [0u32; 4];
            let correct;
            if predicate == vocab::MAX || predicate == vocab::MIN {
                let mut distinct = Vec::with_capacity(4);
                while distinct.len() < 4 {
                    let v = rng.random_range(0..=max_value);
                    if !distinct.contains(&v) {
                        distinct.push(v);
                    }
                }
                values.copy_from_slice(&distinct);
                let pick = if predicate == vocab::MAX {
                    distinct.iter().max()
                } else {
                    distinct.iter().min()
                };
                correct = distinct.iter().position(|v| Some(v) == pick).unwrap_or(0);
            } else {
                correct = rng.random_range(0..4);
                let want_even = predicate == vocab::EVEN;
                for (i, slot) in values.iter_mut().enumerate() {
                    let parity_even = if i == correct { want_even } else { !want_even };
                    loop {
                        let v = rng.random_range(0..=max_value);
                        if (v % 2 == 0) == parity_even {
                            *slot = v;
                            break;
                        }
                    }
                }
            }
            meta.insert("predicate".into(), vocab::symbol(predicate).unwrap_or("?").into());
            meta.insert("correct".into(), correct.to_string());
            let mut prompt = vec![predicate];
            for (i, v) in values.iter().enumerate() {
                prompt.push(vocab::letter(i));
                prompt.extend(vocab::number(*v, width));
            }
            (prompt, vec![vocab::letter(correct)], meta)
        }
    }
}

/// Recomputes the answer of a question from its tokens alone.
pub fn closed_form_answer(kind: TaskKind, prompt: &[Token]) -> Result<Vec<Token>> {
    let malformed = || Error::contract(format!("malformed {} prompt: {}", kind.name(), vocab::to_text(prompt)));
    match kind {
        TaskKind::BinaryParity => {
            let mut ones = 0usize;
            for &t in prompt {
                match vocab::digit_value(t) {
                    Some(0) => {}
                    Some(1) => ones += 1,
                    _ => return Err(malformed()),
                }
            }
            if prompt.is_empty() {
                return Err(malformed());
            }
            Ok(vec![if ones.is_multiple_of(2) { vocab::TRUE } else { vocab::FALSE }])
        }
        TaskKind::ModArith => {
            let plus = prompt.iter().position(|&t| t == vocab::PLUS).ok_or_else(malformed)?;
            let m = prompt.iter().position(|&t| t == vocab::MOD).ok_or_else(malformed)?;
            if m < plus {
                return Err(malformed());
            }
            let a = vocab::parse_number(&prompt[..plus]).ok_or_else(malformed)?;
            let b = vocab::parse_number(&prompt[plus + 1..m]).ok_or_else(malformed)?;
            let p = vocab::parse_number(&prompt[m + 1..]).ok_or_else(malformed)?;
            if p == 0 {
                return Err(malformed());
            }
            Ok(vocab::number((a + b) % p, 1))
        }
        TaskKind::Mcq4 => {
            let (&predicate, rest) = prompt.split_first().ok_or_else(malformed)?;
            let mut values = Vec::with_capacity(4);
            let mut i = 0;
            while i < rest.len() {
                if vocab::letter_index(rest[i]) != Some(values.len()) {
                    return Err(malformed());
                }
                let end = rest[i + 1..]
                    .iter()
                    .position(|&t| vocab::letter_index(t).is_some())
                    .map_or(rest.len(), |p| i + 1 + p);
                values.push(vocab::parse_number(&rest[i + 1..end]).ok_or_else(malformed)?);
                i = end;
            }
            if values.len() != 4 {
                return Err(malformed());
            }
            let matches: Vec<usize> = match predicate {
                vocab::MAX => {
                    let m = *values.iter().max().ok_or_else(malformed)?;
                    (0..4).filter(|&i| values[i] == m).collect()
                }
                vocab::MIN => {
                    let m = *values.iter().min().ok_or_else(malformed)?;
                    (0..4).filter(|&i| values[i] == m).collect()
                }
                vocab::EVEN => (0..4).filter(|&i| values[i] % 2 == 0).collect(),
                vocab::ODD => (0..4).filter(|&i| values[i] % 2 == 1).collect(),
                _ => return Err(malformed()),
            };
            match matches.as_slice() {
                [only] => Ok(vec![vocab::letter(*only)]),
                _ => Err(malformed()),
            }
        }
    }
}

/// Simulated annotator: answers any question it was built with.
#[derive(Clone, Debug)]
pub struct Oracle {
    kind: TaskKind,
    prompts: HashMap<u64, Vec<Token>>,
}

impl Oracle {
    pub fn from_examples<'a>(kind: TaskKind, examples: impl IntoIterator<Item = &'a Example>) -> Self {
        Oracle {
            kind,
            prompts: examples.into_iter().map(|e| (e.id, e.prompt.clone())).collect(),
        }
    }

    pub fn answer(&self, id: u64) -> Result<Vec<Token>> {
        let prompt = self.prompts.get(&id).ok_or(Error::UnknownId(id))?;
        closed_form_answer(self.kind, prompt)
    }
}

/// Answer for an id produced by `generate(spec)`.
pub fn oracle_answer(spec: &TaskSpec, id: u64) -> Result<Vec<Token>> {
    let examples = generate(spec)?;
    Oracle::from_examples(spec.family.kind(), &examples).answer(id)
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    task: TaskKind,
    prompt: String,
    answer: String,
    meta: BTreeMap<String, String>,
}

pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        let rec = Record {
            id: e.id,
            task: e.task,
            prompt: vocab::to_text(&e.prompt),
            answer: vocab::to_text(&e.gold),
            meta: e.meta.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_jsonl(examples)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let prompt = vocab::from_text(&rec.prompt).map_err(|e| parse_err(e.to_string()))?;
        let gold = vocab::from_text(&rec.answer).map_err(|e| parse_err(e.to_string()))?;
        if gold.is_empty() {
            return Err(parse_err("empty answer".into()));
        }
        out.push(Example {
            id: rec.id,
            prompt,
            gold,
            task: rec.task,
            meta: rec.meta,
        });
    }
    Ok(out)
}
