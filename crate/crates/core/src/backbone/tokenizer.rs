//! Character-level tokenizer over lowercase letters, digits and space.

use crate::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPACE: usize = 3;
const LETTERS: usize = 4;
const DIGITS: usize = LETTERS + 26;
pub const VOCAB_SIZE: usize = DIGITS + 10;

/// Token ids padded to a fixed length, with the unpadded length alongside.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl TokenSequence {
    pub fn active(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

fn char_id(c: char) -> Option<usize> {
    match c {
        ' ' => Some(SPACE),
        'a'..='z' => Some(LETTERS + (c as usize - 'a' as usize)),
        '0'..='9' => Some(DIGITS + (c as usize - '0' as usize)),
        _ => None,
    }
}

/// Tokenizes `s`, lowercasing first and truncating to `max_len - 2` characters.
pub fn tokenize(s: &str, max_len: usize) -> Result<TokenSequence> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    for c in s.to_lowercase().chars().take(max_len.saturating_sub(2)) {
        ids.push(char_id(c).ok_or(CoreError::BadCharacter(c))?);
    }
    // characters past the cut still have to be legal
    if let Some(c) = s.to_lowercase().chars().find(|&c| char_id(c).is_none()) {
        return Err(CoreError::BadCharacter(c));
    }
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, len })
}
