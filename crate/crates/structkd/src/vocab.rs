use std::collections::HashMap;

use structkd_core::encoder::UNK_ID;

pub const UNK: &str = "<unk>";

/// Lowercased surface form → id; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_words(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocabulary in first-seen order. Forms are lowercased.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab {
            words: vec![UNK.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK.to_string(), UNK_ID);
        for w in words {
            v.add(w.as_ref());
        }
        v
    }

    /// Restores a vocabulary from its id-ordered word list (as stored in a
    /// checkpoint).
    pub fn from_id_order(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn add(&mut self, word: &str) -> u32 {
        let key = word.to_lowercase();
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(key.clone());
        self.index.insert(key, id);
        id
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}
