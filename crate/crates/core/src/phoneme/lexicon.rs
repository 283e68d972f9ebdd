use std::collections::HashMap;
use std::path::Path;

use log::warn;

use super::vocab;
use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/lexicon.dict");

/// Word to phoneme-index lookup in CMUdict text format.
///
/// Accepted lines are `WORD  PH1 PH2 ...` with stressed vowels (`AE1`).
/// Lines starting with `;;;` are comments, alternate pronunciations such as
/// `WORD(2)` are ignored so the first entry wins, and malformed lines are
/// skipped with a warning.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<usize>>,
}

impl Lexicon {
    /// The lexicon shipped with the crate (a few hundred common lyric words).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).0
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (lex, _) = Self::parse(&text);
        if lex.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "no valid lexicon entries".into(),
            });
        }
        Ok(lex)
    }

    /// Parse lexicon text; returns the lexicon and the number of skipped lines.
    pub fn parse(text: &str) -> (Self, usize) {
        let mut entries = HashMap::new();
        let mut skipped = 0;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap_or_default();
            if word.ends_with(')') && word.contains('(') {
                continue;
            }
            let phones: Option<Vec<usize>> = fields.map(|p| vocab::index_of(strip_stress(p))).collect();
            match phones {
                Some(p) if !p.is_empty() => {
                    entries.entry(normalize_word(word)).or_insert(p);
                }
                _ => {
                    warn!("lexicon line {}: malformed entry {line:?}, skipped", no + 1);
                    skipped += 1;
                }
            }
        }
        (Lexicon { entries }, skipped)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Phoneme indices of the first pronunciation of `word`; empty and logged
    /// when the word is unknown.
    pub fn phoneme_indices(&self, word: &str) -> Vec<usize> {
        let key = normalize_word(word);
        if key.is_empty() {
            return Vec::new();
        }
        match self.entries.get(&key) {
            Some(p) => p.clone(),
            None => {
                warn!("word {word:?} not in lexicon");
                Vec::new()
            }
        }
    }

    pub fn word_to_phonemes(&self, word: &str) -> Vec<&'static str> {
        self.phoneme_indices(word).into_iter().map(vocab::symbol).collect()
    }

    /// Union of the phonemes of every whitespace-separated token in `text`.
    pub fn text_phonemes(&self, text: &str) -> Vec<usize> {
        let mut out: Vec<usize> = text.split_whitespace().flat_map(|w| self.phoneme_indices(w)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn strip_stress(p: &str) -> &str {
    p.trim_end_matches(|c: char| c.is_ascii_digit())
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .to_uppercase()
}
