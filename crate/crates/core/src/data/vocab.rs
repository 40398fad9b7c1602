use std::collections::HashMap;

use crate::encoders::{OOV_TOKEN, PAD_TOKEN};

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token to id map. Id 0 is padding and id 1 is out-of-vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const DEFAULT_MIN_FREQ: usize = 2;

impl Vocab {
    /// Keeps words seen at least `min_freq` times. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(titles: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for title in titles {
            for w in tokenize(title) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(kept.into_iter().map(|(w, _)| w));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied().filter(|&i| i != PAD_TOKEN && i != OOV_TOKEN)
    }

    pub fn id_or_oov(&self, word: &str) -> usize {
        self.get(word).unwrap_or(OOV_TOKEN)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id_or_oov(w)).collect()
    }
}
