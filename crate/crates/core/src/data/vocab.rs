//! Fixed word vocabulary and a whitespace/punctuation tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{HeroError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary of the specials followed by `words` in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut ids = HashMap::new();
        for (i, s) in SPECIAL_NAMES.iter().enumerate() {
            ids.insert(s.to_string(), i);
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(HeroError::Config(format!("invalid vocabulary word {w:?}")));
            }
            if ids.contains_key(&w) {
                return Err(HeroError::Config(format!("duplicate vocabulary word {w:?}")));
            }
            ids.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Self { tokens, ids })
    }

    /// Synthetic vocabulary `w0, w1, ...` padded to exactly `size` entries.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= NUM_SPECIALS {
            return Err(HeroError::Config(format!(
                "vocabulary size {size} leaves no room beyond {NUM_SPECIALS} specials"
            )));
        }
        let words: Vec<String> = (0..size - NUM_SPECIALS).map(|i| format!("w{i}")).collect();
        Self::new(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    /// Content words only (specials excluded), in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// One token per line; line number is the id. The specials are written too.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIALS || lines[..NUM_SPECIALS] != SPECIAL_NAMES {
            return Err(HeroError::Schema(format!(
                "vocabulary {} does not start with the special tokens",
                path.display()
            )));
        }
        Self::new(&lines[NUM_SPECIALS..])
    }

    /// Lowercases, splits on whitespace, and emits every punctuation character
    /// as its own token. Unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined tokens.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
