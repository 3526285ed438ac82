use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in id order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
/// Number of reserved ids; ordinary tokens start here.
pub const NUM_SPECIAL: u32 = SPECIALS.len() as u32;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

/// Bidirectional token/id map. Specials occupy ids `0..NUM_SPECIAL`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials followed by `tokens` in the given order. Duplicates and
    /// special names are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.push(s.to_string())?;
        }
        for t in tokens {
            vocab.push(t.into())?;
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if token.is_empty() || token.contains('\n') {
            return Err(Error::Input(format!("invalid vocabulary token {token:?}")));
        }
        let id = self.tokens.len() as u32;
        if self.index.insert(token.clone(), id).is_some() {
            return Err(Error::Input(format!("duplicate vocabulary token {token:?}")));
        }
        self.tokens.push(token);
        Ok(())
    }

    /// Specials plus one token per character of `symbols`.
    pub fn from_chars(symbols: &[char]) -> Result<Self> {
        Self::from_tokens(symbols.iter().map(|c| c.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id for a character, falling back to `[UNK]`.
    pub fn char_id(&self, c: char) -> u32 {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, chars: &[char]) -> Vec<u32> {
        chars.iter().map(|&c| self.char_id(c)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(s) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected special token {s}"),
                });
            }
        }
        let mut vocab = Self::from_tokens(std::iter::empty::<String>())?;
        for (i, line) in lines.iter().enumerate().skip(SPECIALS.len()) {
            vocab.push(line.to_string()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(vocab)
    }
}

/// Character counts over the non-whitespace text of `texts`.
fn count_chars<'a>(texts: impl IntoIterator<Item = &'a str>) -> HashMap<char, u64> {
    let mut counts = HashMap::new();
    for text in texts {
        for c in text.chars().filter(|c| !c.is_whitespace()) {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

/// Characters ordered by descending count, ties by codepoint, keeping those
/// seen at least `min_count` times. `max_size` bounds the whole vocabulary
/// including specials.
pub fn build_vocab_from_text<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_count: u64,
    max_size: Option<usize>,
) -> Result<Vocabulary> {
    let counts = count_chars(texts);
    if counts.is_empty() {
        return Err(Error::Input("corpus contains no characters".into()));
    }
    if let Some(m) = max_size {
        if m < SPECIALS.len() {
            return Err(Error::Config(format!(
                "max vocabulary size {m} cannot hold the {} special tokens",
                SPECIALS.len()
            )));
        }
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(m) = max_size {
        ranked.truncate(m - SPECIALS.len());
    }
    Vocabulary::from_chars(&ranked.into_iter().map(|(c, _)| c).collect::<Vec<_>>())
}

pub fn build_vocab(corpus_paths: &[PathBuf], min_count: u64, max_size: Option<usize>) -> Result<Vocabulary> {
    let texts = corpus_paths
        .iter()
        .map(|p| fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .collect::<Result<Vec<_>>>()?;
    build_vocab_from_text(texts.iter().map(String::as_str), min_count, max_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_with_specials_first() {
        let v = build_vocab_from_text(["aab"], 1, None).unwrap();
        assert_eq!(&v.tokens()[..5], &SPECIALS);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn min_count_drops_rare_chars_to_unk() {
        let v = build_vocab_from_text(["aab"], 2, None).unwrap();
        assert_eq!(v.id("b"), None);
        assert_eq!(v.char_id('b'), UNK_ID);
    }

    #[test]
    fn ties_break_by_codepoint_and_max_size_truncates() {
        let v = build_vocab_from_text(["cba cba"], 1, Some(7)).unwrap();
        assert_eq!(v.tokens()[5..], ["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn deterministic_rebuild_and_roundtrip() {
        let a = build_vocab_from_text(["hello world"], 1, None).unwrap();
        let b = build_vocab_from_text(["hello world"], 1, None).unwrap();
        assert_eq!(a, b);
        for id in 0..a.len() as u32 {
            assert_eq!(a.id(a.token(id).unwrap()), Some(id));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        a.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), a);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab_from_text(["  \n\n"], 1, None).is_err());
    }

    #[test]
    fn load_rejects_missing_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, "[PAD]\n[CLS]\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Parse { line: 2, .. })));
    }
}
