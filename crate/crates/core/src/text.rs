//! Tokenization and hashing shared by the encoder, metrics and corpus statistics.
//!
//! The tokenizer lowercases its input and emits three kinds of tokens:
//! maximal runs of alphanumeric characters, single CJK ideographs, and single
//! punctuation characters. Whitespace only separates tokens.

use sha2::{Digest, Sha256};

/// Identifier recorded in every metric report.
pub const TOKENIZER_ID: &str = "ws-punct-cjk-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Ideograph,
    Punct,
}

fn is_ideograph(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF
        | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// Splits `text` into lowercased tokens tagged with their kind.
pub fn tokenize_tagged(text: &str) -> Vec<(String, TokenKind)> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<(String, TokenKind)>| {
        if !word.is_empty() {
            out.push((std::mem::take(word), TokenKind::Word));
        }
    };
    for c in text.chars() {
        if is_ideograph(c) {
            flush(&mut word, &mut out);
            out.push((c.to_string(), TokenKind::Ideograph));
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else {
            flush(&mut word, &mut out);
            out.push((c.to_string(), TokenKind::Punct));
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Whitespace + punctuation tokenizer used for metrics and statistics.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_tagged(text).into_iter().map(|(t, _)| t).collect()
}

/// Content tokens only (punctuation dropped).
pub fn words(text: &str) -> Vec<String> {
    tokenize_tagged(text).into_iter().filter(|(_, k)| *k != TokenKind::Punct).map(|(t, _)| t).collect()
}

/// Canonical form for set-semantics comparisons: content tokens joined by a single space.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// 64-bit FNV-1a. Stable across platforms and toolchain versions, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step; used to derive reproducible streams from (seed, key) pairs.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
