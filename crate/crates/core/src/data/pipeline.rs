use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::PretrainExample;
use super::masking::{apply_masking, select_targets, MaskAction, MaskStrategy, MaskingPlan, MaskingRates};
use super::pairs::{frame, pairs_for_document, SentencePair, IS_NEXT};
use super::segment::{Segmenter, Span};
use super::vocab::{is_special, Vocabulary};
use crate::error::{Error, Result};

/// Sentences of characters, whitespace removed.
pub type Document = Vec<Vec<char>>;

/// One sentence per line; blank lines separate documents. Whitespace
/// inside a sentence is dropped.
pub fn parse_corpus(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Document = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
            continue;
        }
        current.push(line.chars().filter(|c| !c.is_whitespace()).collect());
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

pub fn read_corpus(paths: &[PathBuf]) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        docs.extend(parse_corpus(&text));
    }
    if docs.is_empty() {
        return Err(Error::Input("corpus contains no documents".into()));
    }
    Ok(docs)
}

/// SplitMix64 finalizer over the packed inputs.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PAIR_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seq_len: usize,
    pub strategy: MaskStrategy,
    pub rates: MaskingRates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seq_len: 128,
            strategy: MaskStrategy::Char,
            rates: MaskingRates::default(),
        }
    }
}

const HISTOGRAM_BINS: usize = 31;

/// Aggregate counts over generated examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleStats {
    pub examples: u64,
    pub tokens: u64,
    pub maskable: u64,
    pub mask: u64,
    pub random_replace: u64,
    pub keep: u64,
    pub nsp_positive: u64,
    /// Per-example MASK rate in 1% bins; the last bin collects 30% and up.
    pub mask_rate_histogram: Vec<u64>,
}

impl ExampleStats {
    fn ratio(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn mask_rate(&self) -> f64 {
        Self::ratio(self.mask, self.maskable)
    }

    pub fn random_replace_rate(&self) -> f64 {
        Self::ratio(self.random_replace, self.maskable)
    }

    pub fn keep_rate(&self) -> f64 {
        Self::ratio(self.keep, self.maskable)
    }

    pub fn nsp_positive_fraction(&self) -> f64 {
        Self::ratio(self.nsp_positive, self.examples)
    }

    pub fn record(&mut self, ex: &PretrainExample, plan: &MaskingPlan, maskable: usize) {
        if self.mask_rate_histogram.is_empty() {
            self.mask_rate_histogram = vec![0; HISTOGRAM_BINS];
        }
        let mask = plan.count(MaskAction::Mask);
        self.examples += 1;
        self.tokens += ex.tokens.len() as u64;
        self.maskable += maskable as u64;
        self.mask += mask as u64;
        self.random_replace += plan.count(MaskAction::RandomReplace) as u64;
        self.keep += plan.count(MaskAction::Keep) as u64;
        self.nsp_positive += u64::from(ex.nsp_label == IS_NEXT);
        if maskable > 0 {
            let bin = (100 * mask / maskable).min(HISTOGRAM_BINS - 1);
            self.mask_rate_histogram[bin] += 1;
        }
    }
}

/// Word spans of `chars` shifted by `offset`, dropping words that contain
/// out-of-vocabulary characters.
fn maskable_spans(ids: &[u32], spans: Vec<Span>, offset: usize) -> impl Iterator<Item = Span> + '_ {
    spans
        .into_iter()
        .filter(move |s| ids[s.clone()].iter().all(|&t| !is_special(t)))
        .map(move |s| s.start + offset..s.end + offset)
}

/// Frames, segments and masks one sentence pair.
pub fn example_from_pair<R: Rng + ?Sized>(
    pair: &SentencePair<char>,
    vocab: &Vocabulary,
    segmenter: &dyn Segmenter,
    strategy: MaskStrategy,
    rates: &MaskingRates,
    rng: &mut R,
) -> Result<(PretrainExample, MaskingPlan, usize)> {
    let a = vocab.encode(&pair.a);
    let b = vocab.encode(&pair.b);
    let (tokens, segments) = frame(&a, &b);
    let spans: Vec<Span> = maskable_spans(&a, segmenter.segment(&pair.a), 1)
        .chain(maskable_spans(&b, segmenter.segment(&pair.b), a.len() + 2))
        .collect();
    let maskable = spans.iter().map(|s| s.len()).sum();
    let plan = select_targets(tokens.len(), &spans, strategy, rates, rng)?;
    let masked = apply_masking(&tokens, &plan, vocab.len(), rng)?;
    let ex = PretrainExample {
        tokens: masked.input,
        segments,
        predict_positions: masked.positions,
        predict_labels: masked.labels,
        nsp_label: pair.nsp_label,
    };
    Ok((ex, plan, maskable))
}

/// Examples for every document in order. Each document draws its pairs and
/// its masking from separate streams derived from `seed`, so changing the
/// masking strategy leaves the pairing untouched.
pub fn create_examples(
    docs: &[Document],
    vocab: &Vocabulary,
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<PretrainExample>, ExampleStats)> {
    cfg.rates.validate()?;
    let mut examples = Vec::new();
    let mut stats = ExampleStats::default();
    for d in 0..docs.len() {
        let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PAIR_STREAM, d as u64));
        let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, MASK_STREAM, d as u64));
        for pair in pairs_for_document(docs, d, cfg.seq_len, &mut pair_rng)? {
            let (ex, plan, maskable) =
                example_from_pair(&pair, vocab, segmenter, cfg.strategy, &cfg.rates, &mut mask_rng)?;
            stats.record(&ex, &plan, maskable);
            examples.push(ex);
        }
    }
    Ok((examples, stats))
}
