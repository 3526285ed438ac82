//! Generated corpora for tests, demos and ablations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::PretrainExample;
use super::pipeline::Document;
use super::segment::Lexicon;
use super::vocab::{Vocabulary, CLS_ID, MASK_ID, NUM_SPECIAL, SEP_ID};
use crate::error::{Error, Result};

/// First codepoint of the symbol alphabet (CJK unified ideographs).
const SYMBOL_BASE: u32 = 0x4E00;

pub fn symbol_char(i: usize) -> char {
    char::from_u32(SYMBOL_BASE + i as u32).expect("symbol inside the CJK block")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageConfig {
    pub num_symbols: usize,
    pub num_words: usize,
    pub max_word_len: usize,
    /// Distinct successors of each word in the bigram chain.
    pub successors: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            num_symbols: 200,
            num_words: 300,
            max_word_len: 3,
            successors: 3,
            min_sentence_len: 12,
            max_sentence_len: 24,
        }
    }
}

/// A toy language: words of 1 to `max_word_len` symbols chained by a sparse
/// word-bigram model. Multi-symbol words form its lexicon.
#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    pub config: LanguageConfig,
    words: Vec<Vec<char>>,
    next: Vec<Vec<usize>>,
}

impl SyntheticLanguage {
    pub fn generate(config: LanguageConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.num_symbols < 2 || c.num_words == 0 || c.max_word_len == 0 || c.successors == 0 {
            return Err(Error::Config("synthetic language sizes must be positive".into()));
        }
        if c.min_sentence_len == 0 || c.min_sentence_len > c.max_sentence_len {
            return Err(Error::Config("sentence length range is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<Vec<char>> = Vec::with_capacity(c.num_words);
        let mut attempts = 0;
        while words.len() < c.num_words {
            attempts += 1;
            if attempts > 100 * c.num_words {
                return Err(Error::Config("cannot draw enough distinct words".into()));
            }
            let len = rng.gen_range(1..=c.max_word_len);
            let w: Vec<char> = (0..len).map(|_| symbol_char(rng.gen_range(0..c.num_symbols))).collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let next = (0..c.num_words)
            .map(|_| (0..c.successors).map(|_| rng.gen_range(0..c.num_words)).collect())
            .collect();
        Ok(Self { config, words, next })
    }

    pub fn symbols(&self) -> Vec<char> {
        (0..self.config.num_symbols).map(symbol_char).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_chars(&self.symbols()).expect("distinct symbols")
    }

    pub fn words(&self) -> &[Vec<char>] {
        &self.words
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon::new(self.words.iter().map(|w| w.iter().collect::<String>()))
    }

    /// Whole words appended until the length target is reached.
    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<char> {
        let target = rng.gen_range(self.config.min_sentence_len..=self.config.max_sentence_len);
        let mut word = rng.gen_range(0..self.words.len());
        let mut out = Vec::with_capacity(target + self.config.max_word_len);
        while out.len() < target {
            out.extend_from_slice(&self.words[word]);
            word = *self.next[word].choose(rng).expect("successors present");
        }
        out
    }

    pub fn corpus(&self, documents: usize, sentences_per_document: usize, seed: u64) -> Vec<Document> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..documents)
            .map(|_| (0..sentences_per_document).map(|_| self.sentence(&mut rng)).collect())
            .collect()
    }
}

/// Corpus file text: one sentence per line, blank line between documents.
pub fn corpus_text(docs: &[Document]) -> String {
    docs.iter()
        .map(|d| {
            d.iter()
                .map(|s| s.iter().collect::<String>() + "\n")
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Random symbol sequences where each marked position is replaced by
/// `[MASK]` and labelled with the symbol `offset` positions away. Only the
/// relative offset identifies the answer, so the task isolates how well a
/// positional encoding carries relative position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffsetCopyTask {
    pub num_symbols: usize,
    pub offset: i64,
    pub target_fraction: f64,
}

impl Default for OffsetCopyTask {
    fn default() -> Self {
        Self {
            num_symbols: 16,
            offset: -3,
            target_fraction: 0.15,
        }
    }
}

impl OffsetCopyTask {
    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL as usize + self.num_symbols
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_symbols < 2 || self.offset == 0 || !(self.target_fraction > 0.0 && self.target_fraction < 0.5) {
            return Err(Error::Config(
                "offset-copy task needs >= 2 symbols, a nonzero offset and a target fraction in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }

    /// One framed example of exactly `seq_len` tokens.
    pub fn generate<R: Rng + ?Sized>(&self, seq_len: usize, rng: &mut R) -> Result<PretrainExample> {
        self.validate()?;
        let content = seq_len.saturating_sub(2);
        let reach = self.offset.unsigned_abs() as usize;
        if content <= reach {
            return Err(Error::Config(format!(
                "sequence length {seq_len} too short for offset {}",
                self.offset
            )));
        }
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.push(CLS_ID);
        tokens.extend((0..content).map(|_| NUM_SPECIAL + rng.gen_range(0..self.num_symbols as u32)));
        tokens.push(SEP_ID);
        let source = |p: usize| (p as i64 + self.offset) as usize;
        let mut eligible: Vec<usize> = (1..=content)
            .filter(|&p| (1..=content as i64).contains(&(p as i64 + self.offset)))
            .collect();
        eligible.shuffle(rng);
        let wanted = ((self.target_fraction * content as f64).round() as usize).max(1);
        let mut picked: Vec<usize> = Vec::with_capacity(wanted);
        for p in eligible {
            if picked.len() == wanted {
                break;
            }
            let clashes = picked.iter().any(|&q| source(q) == p || source(p) == q);
            if !clashes {
                picked.push(p);
            }
        }
        picked.sort_unstable();
        let labels = picked.iter().map(|&p| tokens[source(p)]).collect();
        for &p in &picked {
            tokens[p] = MASK_ID;
        }
        Ok(PretrainExample {
            segments: vec![0; tokens.len()],
            tokens,
            predict_positions: picked,
            predict_labels: labels,
            nsp_label: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pipeline::parse_corpus;

    #[test]
    fn language_is_deterministic_and_segmentable() {
        let a = SyntheticLanguage::generate(LanguageConfig::default(), 3).unwrap();
        let b = SyntheticLanguage::generate(LanguageConfig::default(), 3).unwrap();
        assert_eq!(a.words, b.words);
        assert!(a.lexicon().len() > 100);
        assert_eq!(a.vocabulary().len(), 205);
        let docs = a.corpus(3, 4, 9);
        assert_eq!(parse_corpus(&corpus_text(&docs)), docs);
        for s in docs.iter().flatten() {
            assert!(s.len() >= 12 && s.len() < 24 + 3);
        }
    }

    #[test]
    fn offset_copy_labels_and_sources() {
        let task = OffsetCopyTask::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let ex = task.generate(32, &mut rng).unwrap();
            ex.validate().unwrap();
            assert_eq!(ex.tokens.len(), 32);
            assert_eq!(ex.predict_positions.len(), 5);
            for (&p, &l) in ex.predict_positions.iter().zip(&ex.predict_labels) {
                assert_eq!(ex.tokens[p], MASK_ID);
                assert_eq!(ex.tokens[p - 3], l);
                assert!(p - 3 >= 1);
            }
        }
    }

    #[test]
    fn offset_copy_rejects_short_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(OffsetCopyTask::default().generate(5, &mut rng).is_err());
    }
}
