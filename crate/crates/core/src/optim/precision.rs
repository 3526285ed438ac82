//! Software emulation of IEEE-754 binary16 storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest finite binary16 value.
pub const HALF_MAX: f64 = 65504.0;

/// Rounds to the nearest binary16 value (ties to even) and widens back.
/// Overflow gives ±infinity, subnormals are honoured and NaN passes through.
pub fn round_half(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let a = x.abs();
    if a == 0.0 {
        return x;
    }
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    // f64 subnormals are far below half's smallest subnormal
    if biased == 0 {
        return 0.0f64.copysign(x);
    }
    // binary16 has 10 fraction bits; below 2^-14 the spacing is fixed at 2^-24
    let exponent = (biased - 1023).max(-14);
    let quantum = 2f64.powi(exponent - 10);
    let rounded = (a / quantum).round_ties_even() * quantum;
    if rounded > HALF_MAX {
        return f64::INFINITY.copysign(x);
    }
    rounded.copysign(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    #[default]
    Full,
    MixedEmulated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionPolicy {
    pub mode: PrecisionMode,
    /// Static loss scale, a power of two.
    pub loss_scale: f64,
    /// Skip the update when a gradient overflows instead of failing.
    pub skip_on_overflow: bool,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self {
            mode: PrecisionMode::Full,
            loss_scale: 1024.0,
            skip_on_overflow: true,
        }
    }
}

impl PrecisionPolicy {
    pub fn mixed() -> Self {
        Self {
            mode: PrecisionMode::MixedEmulated,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.loss_scale;
        let is_pow2 = s >= 1.0 && s.is_finite() && (s.to_bits() & ((1u64 << 52) - 1)) == 0;
        if !is_pow2 {
            return Err(Error::Config(format!("loss scale {s} must be a power of two >= 1")));
        }
        Ok(())
    }
}
