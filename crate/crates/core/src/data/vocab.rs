use std::collections::{BTreeMap, HashMap};

use super::DataError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

const SPECIAL_NAMES: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// The 20 canonical amino acids followed by the ambiguity codes.
pub const RESIDUES: &str = "ACDEFGHIKLMNPQRSTVWYBZXUO";
pub const CANONICAL_RESIDUES: usize = 20;
pub const NUM_RESIDUES: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Special(u32),
    Residue(char),
}

/// Fixed residue vocabulary: specials at 0..5, residues at 5..30.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    residue_ids: HashMap<char, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let residue_ids = RESIDUES
            .chars()
            .enumerate()
            .map(|(i, c)| (c, NUM_SPECIAL + i as u32))
            .collect();
        Self { residue_ids }
    }

    pub fn size(&self) -> usize {
        NUM_SPECIAL as usize + NUM_RESIDUES
    }

    pub fn residue_id(&self, c: char) -> Option<u32> {
        self.residue_ids.get(&c.to_ascii_uppercase()).copied()
    }

    pub fn is_residue_id(id: u32) -> bool {
        (NUM_SPECIAL..NUM_SPECIAL + NUM_RESIDUES as u32).contains(&id)
    }

    /// Class index of a residue id in the reconstruction head.
    pub fn residue_class(id: u32) -> Option<usize> {
        Self::is_residue_id(id).then(|| (id - NUM_SPECIAL) as usize)
    }

    pub fn decode(&self, id: u32) -> Option<Token> {
        if id < NUM_SPECIAL {
            Some(Token::Special(id))
        } else {
            RESIDUES
                .chars()
                .nth((id - NUM_SPECIAL) as usize)
                .map(Token::Residue)
        }
    }

    pub fn token_name(&self, id: u32) -> String {
        match self.decode(id) {
            Some(Token::Special(s)) => SPECIAL_NAMES[s as usize].to_string(),
            Some(Token::Residue(c)) => c.to_string(),
            None => "?".into(),
        }
    }

    /// `[CLS] residues.. [SEP]`, truncated so the result has at most
    /// `max_len` ids. Unknown letters become UNK; callers normalise first.
    pub fn tokenize(&self, seq: &str, max_len: usize) -> Result<Vec<u32>, DataError> {
        if seq.is_empty() {
            return Err(DataError::EmptyInput("protein sequence"));
        }
        if max_len < 3 {
            return Err(DataError::Config(format!(
                "max protein length {max_len} leaves no room for residues"
            )));
        }
        let mut ids = Vec::with_capacity(seq.len().min(max_len - 2) + 2);
        ids.push(CLS);
        ids.extend(
            seq.chars()
                .take(max_len - 2)
                .map(|c| self.residue_id(c).unwrap_or(UNK)),
        );
        ids.push(SEP);
        Ok(ids)
    }
}

/// Lowercased words split on anything that is not alphanumeric.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Word-level vocabulary built from knowledge text.
#[derive(Clone, Debug, PartialEq)]
pub struct TextVocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl TextVocabulary {
    /// Words occurring at least `min_count` times, ordered lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .map(|(w, _)| w)
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIAL + i as u32))
            .collect();
        Self { words, ids }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn size(&self) -> usize {
        NUM_SPECIAL as usize + self.words.len()
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        if id < NUM_SPECIAL {
            Some(SPECIAL_NAMES[id as usize])
        } else {
            self.words.get((id - NUM_SPECIAL) as usize).map(String::as_str)
        }
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<u32>, DataError> {
        if max_len < 2 {
            return Err(DataError::Config(format!(
                "max text length {max_len} cannot hold [CLS] and [SEP]"
            )));
        }
        let mut words = split_words(text).peekable();
        if words.peek().is_none() {
            return Err(DataError::EmptyInput("knowledge text"));
        }
        let mut ids = vec![CLS];
        ids.extend(words.take(max_len - 2).map(|w| self.word_id(&w)));
        ids.push(SEP);
        Ok(ids)
    }
}
