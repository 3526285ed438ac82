//! Corpus to pretraining examples: character vocabulary, pluggable word
//! segmentation, character or whole-word masking, next-sentence pairing and
//! JSON-lines serialization.

mod example;
mod masking;
mod pairs;
mod pipeline;
mod segment;
pub mod synthetic;
pub mod vocab;

pub use example::{read_examples, write_examples, PretrainExample};
pub use masking::{
    apply_masking, select_targets, MaskAction, MaskStrategy, MaskTarget, MaskedTokens, MaskingPlan, MaskingRates,
};
pub use pairs::{build_pairs, frame, make_pair, pairs_for_document, truncate_pair, SentencePair, IS_NEXT, NOT_NEXT};
pub use pipeline::{
    create_examples, derive_seed, example_from_pair, parse_corpus, read_corpus, Document, ExampleStats,
    PipelineConfig,
};
pub use segment::{segment_words, CharSegmenter, Lexicon, Segmenter, Span};
pub use synthetic::{corpus_text, LanguageConfig, OffsetCopyTask, SyntheticLanguage};
pub use vocab::{build_vocab, build_vocab_from_text, Vocabulary};
