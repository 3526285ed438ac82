use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

/// Half-open range of character positions forming one word.
pub type Span = Range<usize>;

/// Splits a character sequence into word spans that partition it.
pub trait Segmenter {
    fn segment(&self, chars: &[char]) -> Vec<Span>;
}

/// Every character is its own word.
#[derive(Clone, Copy, Debug, Default)]
pub struct CharSegmenter;

impl Segmenter for CharSegmenter {
    fn segment(&self, chars: &[char]) -> Vec<Span> {
        (0..chars.len()).map(|i| i..i + 1).collect()
    }
}

/// Multi-character words for greedy longest-match segmentation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<Vec<char>>,
    max_len: usize,
}

impl Lexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Single-character entries are dropped; they are the fallback anyway.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lex = Self::default();
        for w in words {
            lex.insert(w.as_ref());
        }
        lex
    }

    fn insert(&mut self, word: &str) {
        let chars: Vec<char> = word.trim().chars().collect();
        if chars.len() >= 2 {
            self.max_len = self.max_len.max(chars.len());
            self.words.insert(chars);
        }
    }

    /// One word per line; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(text.lines()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn contains(&self, word: &[char]) -> bool {
        self.words.contains(word)
    }
}

impl Segmenter for Lexicon {
    fn segment(&self, chars: &[char]) -> Vec<Span> {
        segment_words(chars, self)
    }
}

/// Greedy longest match, left to right. Unmatched characters become
/// singleton spans.
pub fn segment_words(chars: &[char], lexicon: &Lexicon) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let longest = lexicon.max_len.min(chars.len() - i);
        let len = (2..=longest)
            .rev()
            .find(|&l| lexicon.contains(&chars[i..i + l]))
            .unwrap_or(1);
        spans.push(i..i + len);
        i += len;
    }
    spans
}
