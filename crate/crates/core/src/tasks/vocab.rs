//! Fixed symbol vocabulary shared by every task family.

use crate::error::{Error, Result};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
/// Separator that ends every rendered question ("the answer is").
pub const ANS: Token = 3;
pub const DIGIT_0: Token = 4;
pub const TRUE: Token = 14;
pub const FALSE: Token = 15;
pub const LETTER_A: Token = 16;
pub const PLUS: Token = 20;
pub const MOD: Token = 21;
pub const MAX: Token = 22;
pub const MIN: Token = 23;
pub const EVEN: Token = 24;
pub const ODD: Token = 25;

pub const VOCAB_SIZE: usize = 32;

const SYMBOLS: [&str; VOCAB_SIZE] = [
    "<pad>", "<bos>", "<eos>", "ANS:", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "true", "false", "A", "B",
    "C", "D", "+", "mod", "max", "min", "even", "odd", "?", ";", "<u0>", "<u1>", "<u2>", "<u3>",
];

pub fn digit(d: u32) -> Token {
    debug_assert!(d < 10);
    DIGIT_0 + d
}

pub fn digit_value(t: Token) -> Option<u32> {
    (DIGIT_0..DIGIT_0 + 10).contains(&t).then(|| t - DIGIT_0)
}

pub fn letter(i: usize) -> Token {
    debug_assert!(i < 4);
    LETTER_A + i as Token
}

pub fn letter_index(t: Token) -> Option<usize> {
    (LETTER_A..LETTER_A + 4).contains(&t).then(|| (t - LETTER_A) as usize)
}

/// Decimal digits of `n`, most significant first, left-padded to `width`.
pub fn number(n: u32, width: usize) -> Vec<Token> {
    let s = format!("{n:0width$}");
    s.bytes().map(|b| digit(u32::from(b - b'0'))).collect()
}

pub fn parse_number(tokens: &[Token]) -> Option<u32> {
    if tokens.is_empty() {
        return None;
    }
    tokens
        .iter()
        .try_fold(0u32, |acc, &t| acc.checked_mul(10)?.checked_add(digit_value(t)?))
}

pub fn symbol(t: Token) -> Option<&'static str> {
    SYMBOLS.get(t as usize).copied()
}

pub fn token(symbol: &str) -> Option<Token> {
    SYMBOLS.iter().position(|s| *s == symbol).map(|i| i as Token)
}

/// Space-separated symbol string.
pub fn to_text(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| symbol(t).unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn from_text(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace()
        .map(|s| token(s).ok_or_else(|| Error::contract(format!("unknown symbol {s:?}"))))
        .collect()
}
