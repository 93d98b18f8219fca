//! Closed 64-symbol vocabulary shared by questions and answers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const END: usize = 1;
pub const VOCAB_SIZE: usize = 64;

const WORDS: [&str; 51] = [
    "<pad>", "<end>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "how", "many", "blobs",
    "count", "the", "is", "there", "an", "anomaly", "odd", "shape", "what", "sum", "of", "dots",
    "add", "groups", "plus", "equals", "which", "bar", "tallest", "highest", "first", "second",
    "third", "fourth", "fifth", "yes", "no", "?", "are", "in", "image", "all", "shapes", "total",
    "dot", "tall",
];

/// Spelling of token `id`; ids past the named words are reserved slots.
pub fn word(id: usize) -> String {
    match WORDS.get(id) {
        Some(w) => (*w).to_string(),
        None => format!("<unused{id}>"),
    }
}

pub fn id(word: &str) -> Result<usize> {
    WORDS.iter().position(|w| *w == word).ok_or_else(|| Error::Lookup {
        what: "vocabulary word",
        name: word.to_string(),
        available: WORDS.join(" "),
    })
}

pub fn digit(n: usize) -> usize {
    debug_assert!(n < 10);
    2 + n
}

pub fn encode(words: &str) -> Result<TokenSequence> {
    words
        .split_whitespace()
        .map(id)
        .collect::<Result<Vec<_>>>()
        .map(TokenSequence::new)
}

pub fn decode(ids: &[usize]) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

/// Token ids without an end marker; the decoder appends/strips `<end>`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i >= vocab_size) {
            Some(&bad) => Err(Error::Index {
                what: "token id",
                index: bad,
                bound: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&decode(&self.ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_fit_the_vocabulary_and_are_unique() {
        assert!(WORDS.len() <= VOCAB_SIZE);
        let mut seen = std::collections::HashSet::new();
        assert!(WORDS.iter().all(|w| seen.insert(*w)));
    }

    #[test]
    fn encode_decode() {
        let q = encode("how many blobs ?").unwrap();
        assert_eq!(decode(&q.ids), "how many blobs ?");
        assert_eq!(word(digit(7)), "7");
        assert!(encode("zebra").is_err());
        assert_eq!(word(63), "<unused63>");
    }
}
