use rand::Rng;

use super::vocab::{CLS_ID, SEP_ID};
use crate::error::{Error, Result};

/// `[CLS]`, two `[SEP]`s.
pub const FRAMING_TOKENS: usize = 3;

/// NSP label for a true successor.
pub const IS_NEXT: u8 = 0;
/// NSP label for a randomly drawn second sentence.
pub const NOT_NEXT: u8 = 1;

const NEGATIVE_RETRIES: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub nsp_label: u8,
}

/// Removes tokens from the end of the longer sentence (the first on ties)
/// until both fit in `max_tokens` content slots.
pub fn truncate_pair<T>(a: &mut Vec<T>, b: &mut Vec<T>, max_tokens: usize) {
    while a.len() + b.len() > max_tokens {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

fn check_seq_len(seq_len: usize) -> Result<()> {
    if seq_len < FRAMING_TOKENS + 2 {
        return Err(Error::Config(format!(
            "sequence length {seq_len} leaves no room for two sentences"
        )));
    }
    Ok(())
}

/// Builds the pair for sentence `index` of document `doc`, with B the true
/// successor when `is_next`, otherwise a sentence from another document
/// (or a non-adjacent sentence of the same one when there is only one).
pub fn make_pair<T: Clone, R: Rng + ?Sized>(
    docs: &[Vec<Vec<T>>],
    doc: usize,
    index: usize,
    is_next: bool,
    seq_len: usize,
    rng: &mut R,
) -> Result<SentencePair<T>> {
    check_seq_len(seq_len)?;
    let sentences = &docs[doc];
    let b = if is_next {
        sentences
            .get(index + 1)
            .ok_or_else(|| Error::Input(format!("sentence {index} of document {doc} has no successor")))?
            .clone()
    } else {
        random_sentence(docs, doc, index, rng)?.clone()
    };
    let mut a = sentences[index].clone();
    let mut b = b;
    truncate_pair(&mut a, &mut b, seq_len - FRAMING_TOKENS);
    Ok(SentencePair {
        a,
        b,
        nsp_label: if is_next { IS_NEXT } else { NOT_NEXT },
    })
}

fn random_sentence<'a, T, R: Rng + ?Sized>(
    docs: &'a [Vec<Vec<T>>],
    doc: usize,
    index: usize,
    rng: &mut R,
) -> Result<&'a Vec<T>> {
    let others: Vec<usize> = (0..docs.len()).filter(|&d| d != doc && !docs[d].is_empty()).collect();
    if !others.is_empty() {
        let d = others[rng.gen_range(0..others.len())];
        return Ok(&docs[d][rng.gen_range(0..docs[d].len())]);
    }
    let own = &docs[doc];
    for _ in 0..NEGATIVE_RETRIES {
        let j = rng.gen_range(0..own.len());
        if j != index && j != index + 1 {
            return Ok(&own[j]);
        }
    }
    Err(Error::Input(
        "cannot draw a negative next-sentence pair: corpus has one document and too few sentences".into(),
    ))
}

/// One pair per sentence that has a successor; B is the successor with
/// probability one half.
pub fn pairs_for_document<T: Clone, R: Rng + ?Sized>(
    docs: &[Vec<Vec<T>>],
    doc: usize,
    seq_len: usize,
    rng: &mut R,
) -> Result<Vec<SentencePair<T>>> {
    let n = docs[doc].len();
    (0..n.saturating_sub(1))
        .map(|i| {
            let is_next = rng.gen_bool(0.5);
            make_pair(docs, doc, i, is_next, seq_len, rng)
        })
        .collect()
}

/// Pairs for every document in order, sharing one random stream.
pub fn build_pairs<T: Clone, R: Rng + ?Sized>(
    docs: &[Vec<Vec<T>>],
    seq_len: usize,
    rng: &mut R,
) -> Result<Vec<SentencePair<T>>> {
    check_seq_len(seq_len)?;
    let mut out = Vec::new();
    for d in 0..docs.len() {
        out.extend(pairs_for_document(docs, d, seq_len, rng)?);
    }
    Ok(out)
}

/// `[CLS] a [SEP] b [SEP]` with segment 0 through the first `[SEP]`.
pub fn frame(a: &[u32], b: &[u32]) -> (Vec<u32>, Vec<u8>) {
    let mut tokens = Vec::with_capacity(a.len() + b.len() + FRAMING_TOKENS);
    tokens.push(CLS_ID);
    tokens.extend_from_slice(a);
    tokens.push(SEP_ID);
    let first = tokens.len();
    tokens.extend_from_slice(b);
    tokens.push(SEP_ID);
    let mut segments = vec![0u8; tokens.len()];
    segments[first..].fill(1);
    (tokens, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn docs() -> Vec<Vec<Vec<u32>>> {
        vec![vec![vec![10, 11], vec![12]], vec![vec![20], vec![21, 22, 23]]]
    }

    #[test]
    fn forced_positive_uses_successor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_pair(&docs(), 0, 0, true, 16, &mut rng).unwrap();
        assert_eq!((p.a, p.b, p.nsp_label), (vec![10, 11], vec![12], IS_NEXT));
    }

    #[test]
    fn negatives_come_from_other_documents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = make_pair(&docs(), 0, 0, false, 16, &mut rng).unwrap();
            assert!(p.b[0] >= 20);
            assert_eq!(p.nsp_label, NOT_NEXT);
        }
    }

    #[test]
    fn truncation_is_longest_first_from_the_end() {
        let (mut a, mut b) = (vec![1, 2, 3, 4, 5], vec![6, 7]);
        truncate_pair(&mut a, &mut b, 4);
        assert_eq!((a, b), (vec![1, 2], vec![6, 7]));
        let (mut a, mut b) = (vec![1, 2], vec![3, 4, 5]);
        truncate_pair(&mut a, &mut b, 3);
        assert_eq!((a, b), (vec![1], vec![3, 4]));
    }

    #[test]
    fn framed_length_never_exceeds_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sl in 5..12 {
            for p in build_pairs(&docs(), sl, &mut rng).unwrap() {
                assert!(p.a.len() + p.b.len() + FRAMING_TOKENS <= sl);
                assert!(!p.a.is_empty() && !p.b.is_empty());
            }
        }
    }

    #[test]
    fn single_short_document_cannot_make_negatives() {
        let one = vec![vec![vec![1u32], vec![2]]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_pair(&one, 0, 0, false, 16, &mut rng).is_err());
    }

    #[test]
    fn framing_and_segments() {
        let (t, s) = frame(&[10, 11], &[12]);
        assert_eq!(t, vec![CLS_ID, 10, 11, SEP_ID, 12, SEP_ID]);
        assert_eq!(s, vec![0, 0, 0, 0, 1, 1]);
    }
}
