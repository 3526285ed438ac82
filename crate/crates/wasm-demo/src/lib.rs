//! Browser bindings over `relformer`. Every export returns a JSON string;
//! errors come back as `{"error": "..."}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use relformer::data::{select_targets, segment_words, Lexicon, MaskAction, MaskStrategy, MaskingRates, Vocabulary};
use relformer::encoder::{Encoder, EncoderConfig};
use relformer::posenc::{frpe_vector, SchemeKind};

const MAX_TEXT: usize = 64;

fn respond(result: relformer::Result<Value>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// Rows are offsets `-max_delta..=max_delta`, columns the `d_z` components.
#[wasm_bindgen]
pub fn frpe_heatmap(max_delta: u32, d_z: u32) -> String {
    respond((|| {
        let max_delta = i64::from(max_delta.min(256));
        let rows = (-max_delta..=max_delta)
            .map(|delta| frpe_vector(delta, d_z as usize))
            .collect::<relformer::Result<Vec<_>>>()?;
        Ok(json!({ "deltas": (-max_delta..=max_delta).collect::<Vec<_>>(), "rows": rows }))
    })())
}

/// Row-softmaxed attention of a freshly initialised one-layer encoder on
/// `text`, one matrix per head.
#[wasm_bindgen]
pub fn attention_pattern(scheme: &str, text: &str, seed: u32) -> String {
    respond((|| {
        let scheme: SchemeKind = scheme.parse()?;
        let chars: Vec<char> = text.chars().take(MAX_TEXT).collect();
        if chars.is_empty() {
            return Err(relformer::Error::Input("text is empty".into()));
        }
        let mut symbols = chars.clone();
        symbols.sort_unstable();
        symbols.dedup();
        let vocab = Vocabulary::from_chars(&symbols)?;
        let config = EncoderConfig {
            hidden_size: 32,
            num_layers: 1,
            num_heads: 2,
            intermediate_size: 64,
            max_position: MAX_TEXT,
            ..EncoderConfig::desk(vocab.len(), scheme)
        };
        let (encoder, params) = Encoder::init(config, u64::from(seed))?;
        let tokens = vocab.encode(&chars);
        let segments = vec![0u8; tokens.len()];
        let heads = encoder
            .attention_scores(&params, 0, &tokens, &segments)?
            .into_iter()
            .map(|scores| (0..scores.rows()).map(|i| softmax(scores.row(i))).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        Ok(json!({ "chars": chars, "heads": heads }))
    })())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Masking plan for `text` under `strategy`, with `lexicon` holding
/// whitespace-separated words. `rate_scale` multiplies the default rates.
#[wasm_bindgen]
pub fn masking_plan(text: &str, lexicon: &str, strategy: &str, rate_scale: f64, seed: u32) -> String {
    respond((|| {
        let strategy: MaskStrategy = strategy.parse()?;
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let lexicon = Lexicon::new(lexicon.split_whitespace());
        let spans = segment_words(&chars, &lexicon);
        let base = MaskingRates::default();
        let scale = rate_scale.clamp(0.0, 1.0 / base.total());
        let rates = MaskingRates {
            mask: base.mask * scale,
            random_replace: base.random_replace * scale,
            keep: base.keep * scale,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
        let plan = select_targets(chars.len(), &spans, strategy, &rates, &mut rng)?;
        let mut actions = vec![Value::Null; chars.len()];
        for t in &plan.targets {
            actions[t.position] = json!(match t.action {
                MaskAction::Mask => "mask",
                MaskAction::RandomReplace => "random",
                MaskAction::Keep => "keep",
            });
        }
        let words: Vec<[usize; 2]> = spans.iter().map(|s| [s.start, s.end]).collect();
        Ok(json!({ "chars": chars, "words": words, "actions": actions }))
    })())
}
