use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::segment::Span;
use super::vocab::{is_special, MASK_ID, NUM_SPECIAL};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Characters are targeted independently.
    #[default]
    Char,
    /// Whole words are targeted together.
    Wwm,
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskStrategy::Char => "char",
            MaskStrategy::Wwm => "wwm",
        })
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "char" => Ok(MaskStrategy::Char),
            "wwm" => Ok(MaskStrategy::Wwm),
            other => Err(Error::Config(format!("unknown masking strategy {other:?} (char or wwm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Mask,
    RandomReplace,
    Keep,
}

impl MaskAction {
    pub const ALL: [MaskAction; 3] = [MaskAction::Mask, MaskAction::RandomReplace, MaskAction::Keep];
}

/// Fractions of maskable positions that become targets of each action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingRates {
    pub mask: f64,
    pub random_replace: f64,
    pub keep: f64,
}

impl Default for MaskingRates {
    fn default() -> Self {
        Self {
            mask: 0.12,
            random_replace: 0.015,
            keep: 0.015,
        }
    }
}

impl MaskingRates {
    pub fn total(&self) -> f64 {
        self.mask + self.random_replace + self.keep
    }

    fn get(&self, action: MaskAction) -> f64 {
        match action {
            MaskAction::Mask => self.mask,
            MaskAction::RandomReplace => self.random_replace,
            MaskAction::Keep => self.keep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = MaskAction::ALL.iter().all(|&a| (0.0..=1.0).contains(&self.get(a)));
        if !ok || self.total() > 1.0 {
            return Err(Error::Config("masking rates must be in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskTarget {
    pub position: usize,
    pub action: MaskAction,
}

/// Prediction targets sorted by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    pub strategy: MaskStrategy,
    pub targets: Vec<MaskTarget>,
}

impl MaskingPlan {
    pub fn count(&self, action: MaskAction) -> usize {
        self.targets.iter().filter(|t| t.action == action).count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets.iter().map(|t| t.position)
    }
}

/// `x` rounded down or up with probability equal to its fractional part, so
/// the expectation is `x`. Values within 1e-9 of an integer are snapped.
fn stochastic_round<R: Rng + ?Sized>(x: f64, rng: &mut R) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        return nearest as usize;
    }
    let floor = x.floor();
    floor as usize + usize::from(rng.gen_bool(x - floor))
}

/// Chooses prediction targets among the maskable positions covered by
/// `spans` (coordinates in a sequence of length `n`).
///
/// Each action class gets a budget of `rate·m` targets (m maskable
/// positions), stochastically rounded; at least one target is kept when
/// m ≥ 8. Spans are visited in random order and handed to a class drawn in
/// proportion to the remaining budgets. A span longer than its class's
/// remainder r is taken with probability r/len, which keeps every class
/// unbiased. Under `Char` every span is first split into characters.
pub fn select_targets<R: Rng + ?Sized>(
    n: usize,
    spans: &[Span],
    strategy: MaskStrategy,
    rates: &MaskingRates,
    rng: &mut R,
) -> Result<MaskingPlan> {
    let mut covered = vec![false; n];
    for s in spans {
        if s.start >= s.end || s.end > n {
            return Err(Error::Input(format!("span {s:?} invalid for length {n}")));
        }
        for p in s.clone() {
            if std::mem::replace(&mut covered[p], true) {
                return Err(Error::Input(format!("spans overlap at position {p}")));
            }
        }
    }
    let mut units: Vec<Span> = match strategy {
        MaskStrategy::Char => spans.iter().flat_map(|s| s.clone().map(|p| p..p + 1)).collect(),
        MaskStrategy::Wwm => spans.to_vec(),
    };
    let m: usize = units.iter().map(|s| s.len()).sum();
    let mut budget = MaskAction::ALL.map(|a| stochastic_round(rates.get(a) * m as f64, rng));
    if m >= 8 && budget.iter().sum::<usize>() == 0 && rates.total() > 0.0 {
        budget[0] = 1;
    }
    units.shuffle(rng);
    let mut targets = Vec::new();
    for unit in units {
        let remaining: usize = budget.iter().sum();
        if remaining == 0 {
            break;
        }
        let mut draw = rng.gen_range(0..remaining);
        let class = budget
            .iter()
            .position(|&b| {
                if draw < b {
                    true
                } else {
                    draw -= b;
                    false
                }
            })
            .expect("draw below total budget");
        let left = budget[class];
        let take = if unit.len() <= left {
            budget[class] -= unit.len();
            true
        } else {
            budget[class] = 0;
            rng.gen_bool(left as f64 / unit.len() as f64)
        };
        if take {
            let action = MaskAction::ALL[class];
            targets.extend(unit.map(|position| MaskTarget { position, action }));
        }
    }
    targets.sort_by_key(|t| t.position);
    Ok(MaskingPlan { strategy, targets })
}

/// Masked input plus the prediction positions and their original ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    pub input: Vec<u32>,
    pub positions: Vec<usize>,
    pub labels: Vec<u32>,
}

const REPLACE_RETRIES: usize = 32;

/// Applies `plan` to `ids`. Random replacements are drawn uniformly from
/// the non-special ids below `vocab_size`, redrawn when they equal the
/// original.
pub fn apply_masking<R: Rng + ?Sized>(
    ids: &[u32],
    plan: &MaskingPlan,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedTokens> {
    let mut input = ids.to_vec();
    let mut positions = Vec::with_capacity(plan.targets.len());
    let mut labels = Vec::with_capacity(plan.targets.len());
    for t in &plan.targets {
        let original = *ids.get(t.position).ok_or_else(|| {
            Error::Invariant(format!("target {} beyond sequence length {}", t.position, ids.len()))
        })?;
        if is_special(original) {
            return Err(Error::Invariant(format!(
                "target {} points at special token id {original}",
                t.position
            )));
        }
        if positions.last().is_some_and(|&p| p >= t.position) {
            return Err(Error::Invariant("plan positions not strictly increasing".into()));
        }
        input[t.position] = match t.action {
            MaskAction::Mask => MASK_ID,
            MaskAction::Keep => original,
            MaskAction::RandomReplace => random_token(original, vocab_size, rng)?,
        };
        positions.push(t.position);
        labels.push(original);
    }
    Ok(MaskedTokens {
        input,
        positions,
        labels,
    })
}

fn random_token<R: Rng + ?Sized>(original: u32, vocab_size: usize, rng: &mut R) -> Result<u32> {
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::Config(format!("vocabulary of {vocab_size} has no ordinary tokens")));
    }
    let mut pick = original;
    for _ in 0..REPLACE_RETRIES {
        pick = rng.gen_range(NUM_SPECIAL..vocab_size as u32);
        if pick != original {
            break;
        }
    }
    Ok(pick)
}
