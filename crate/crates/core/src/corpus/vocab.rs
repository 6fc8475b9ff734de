//! Closed word-level vocabulary.

use std::collections::{BTreeSet, HashMap};

use crate::error::{CarpeError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const CTX: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", "<ctx>"];
const PUNCT: [char; 4] = [':', '?', '.', ','];

/// Splits on whitespace and peels trailing punctuation into separate words.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let trimmed = chunk.trim_end_matches(PUNCT);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        out.extend(chunk[trimmed.len()..].chars().map(String::from));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds the vocabulary from a set of texts; word ids follow sorted order after the specials.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(split_words(t));
        }
        let words: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text)
            .into_iter()
            .map(|w| match self.ids.get(&w) {
                Some(&id) if !Self::is_special(id) => Ok(id),
                _ => Err(CarpeError::Tokenize(w)),
            })
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`] for canonically spaced text; special ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if Self::is_special(id) {
                continue;
            }
            let Some(w) = self.word(id) else { continue };
            let is_punct = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}
