//! Positional encodings: fixed sinusoidal relative (FRPE), learned relative
//! with clipping (PRPE) and learned absolute (PAPE).

use std::borrow::Cow;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_PRPE_CLIP: usize = 16;
pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    #[default]
    Frpe,
    Prpe,
    Pape,
    None,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [Self::None, Self::Pape, Self::Prpe, Self::Frpe];

    pub fn is_relative(self) -> bool {
        matches!(self, Self::Frpe | Self::Prpe)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frpe => "frpe",
            Self::Prpe => "prpe",
            Self::Pape => "pape",
            Self::None => "none",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frpe" => Ok(Self::Frpe),
            "prpe" => Ok(Self::Prpe),
            "pape" => Ok(Self::Pape),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown encoding scheme {other:?}"))),
        }
    }
}

/// A scheme with its settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingScheme {
    Frpe,
    Prpe { clip: usize },
    Pape { max_position: usize },
    None,
}

impl EncodingScheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Self::Frpe => SchemeKind::Frpe,
            Self::Prpe { .. } => SchemeKind::Prpe,
            Self::Pape { .. } => SchemeKind::Pape,
            Self::None => SchemeKind::None,
        }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        match *self {
            Self::Prpe { clip } if clip < 1 => {
                Err(Error::Config("PRPE clip distance must be at least 1".into()))
            }
            Self::Pape { max_position } if max_position < train_len => Err(Error::Config(format!(
                "PAPE max position {max_position} is below the training length {train_len}"
            ))),
            _ => Ok(()),
        }
    }
}

/// The FRPE vector for offset `delta = j - i`:
/// `[2k] = sin(delta / 10000^(2k/d_z))`, `[2k+1] = cos(delta / 10000^(2k/d_z))`.
pub fn frpe_vector(delta: i64, d_z: usize) -> Result<Vec<f64>> {
    if d_z == 0 || !d_z.is_multiple_of(2) {
        return Err(Error::Config(format!("FRPE needs an even positive size, got {d_z}")));
    }
    let mut out = vec![0.0; d_z];
    fill_frpe(delta, &mut out);
    Ok(out)
}

fn fill_frpe(delta: i64, out: &mut [f64]) {
    let d_z = out.len() as f64;
    for k in 0..out.len() / 2 {
        let angle = delta as f64 / 10000f64.powf(2.0 * k as f64 / d_z);
        let (s, c) = angle.sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Key,
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RelBanks {
    /// One fixed bank used for both roles; row `Δ + max_len - 1`.
    Fixed { table: Tensor, max_len: usize },
    /// Separate key/value banks; row `clamp(Δ, -clip, clip) + clip`.
    Learned {
        key: Tensor,
        value: Tensor,
        clip: usize,
    },
}

/// Per-offset vectors of length `d_z`, shared by all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPositionTable {
    pub d_z: usize,
    pub banks: RelBanks,
}

/// Builds a relative table covering offsets in `[-(max_len-1), max_len-1]`.
pub fn build_rel_table(
    max_len: usize,
    d_z: usize,
    scheme: EncodingScheme,
    rng_seed: u64,
) -> Result<RelPositionTable> {
    if max_len == 0 {
        return Err(Error::Config("relative table needs max_len >= 1".into()));
    }
    match scheme {
        EncodingScheme::Frpe => RelPositionTable::frpe(max_len, d_z),
        EncodingScheme::Prpe { clip } => {
            if clip == 0 {
                return Err(Error::Config("PRPE clip distance must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let rows = 2 * clip + 1;
            Ok(RelPositionTable {
                d_z,
                banks: RelBanks::Learned {
                    key: Tensor::randn(&[rows, d_z], INIT_STD, &mut rng),
                    value: Tensor::randn(&[rows, d_z], INIT_STD, &mut rng),
                    clip,
                },
            })
        }
        EncodingScheme::Pape { .. } | EncodingScheme::None => Err(Error::Config(format!(
            "{} has no relative table",
            scheme.kind()
        ))),
    }
}

impl RelPositionTable {
    pub fn frpe(max_len: usize, d_z: usize) -> Result<Self> {
        if d_z == 0 || !d_z.is_multiple_of(2) {
            return Err(Error::Config(format!("FRPE needs an even positive size, got {d_z}")));
        }
        let rows = 2 * max_len - 1;
        let mut data = vec![0.0; rows * d_z];
        for (r, chunk) in data.chunks_mut(d_z).enumerate() {
            fill_frpe(r as i64 - (max_len as i64 - 1), chunk);
        }
        Ok(Self {
            d_z,
            banks: RelBanks::Fixed {
                table: Tensor::from_parts(vec![rows, d_z], data),
                max_len,
            },
        })
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.banks, RelBanks::Fixed { .. })
    }

    pub fn num_rows(&self) -> usize {
        match &self.banks {
            RelBanks::Fixed { table, .. } => table.rows(),
            RelBanks::Learned { key, .. } => key.rows(),
        }
    }

    fn row_for(&self, delta: i64) -> Option<usize> {
        match &self.banks {
            RelBanks::Fixed { max_len, .. } => {
                let reach = *max_len as i64 - 1;
                (delta.abs() <= reach).then(|| (delta + reach) as usize)
            }
            RelBanks::Learned { clip, .. } => {
                let c = *clip as i64;
                Some((delta.clamp(-c, c) + c) as usize)
            }
        }
    }

    /// Vector for the pair `(i, j)`. FRPE offsets beyond the built range are
    /// computed from the closed form.
    pub fn rel_lookup(&self, i: usize, j: usize, role: Role) -> Vec<f64> {
        let delta = j as i64 - i as i64;
        match (&self.banks, self.row_for(delta)) {
            (RelBanks::Fixed { table, .. }, Some(r)) => table.row(r).to_vec(),
            (RelBanks::Fixed { .. }, None) => {
                let mut out = vec![0.0; self.d_z];
                fill_frpe(delta, &mut out);
                out
            }
            (RelBanks::Learned { key, value, .. }, Some(r)) => match role {
                Role::Key => key.row(r).to_vec(),
                Role::Value => value.row(r).to_vec(),
            },
            (RelBanks::Learned { .. }, None) => unreachable!("clipped offsets always resolve"),
        }
    }

    /// Rebuilds a fixed table so it covers sequences of length `len`.
    pub fn grow(&mut self, len: usize) {
        if let RelBanks::Fixed { max_len, .. } = &self.banks {
            if len > *max_len {
                *self = Self::frpe(len, self.d_z).expect("d_z validated at construction");
            }
        }
    }

    /// The table itself when it covers length `n`, otherwise a grown copy.
    pub fn covering(&self, n: usize) -> Cow<'_, Self> {
        match &self.banks {
            RelBanks::Fixed { max_len, .. } if n > *max_len => {
                let mut grown = self.clone();
                grown.grow(n);
                Cow::Owned(grown)
            }
            _ => Cow::Borrowed(self),
        }
    }

    /// Row index of each `(i, j)` pair of an `n`-long sequence, flattened
    /// row-major. The table must cover `n`.
    pub fn index_matrix(&self, n: usize) -> Result<Rc<[usize]>> {
        let mut idx = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let delta = j as i64 - i as i64;
                let row = self.row_for(delta).ok_or(Error::OutOfRange {
                    what: "relative offset",
                    index: delta.unsigned_abs() as usize,
                    limit: self.num_rows(),
                })?;
                idx.push(row);
            }
        }
        Ok(idx.into())
    }
}

/// Row index of every `(i, j)` pair under offset clipping to `±clip`.
pub fn clipped_index(n: usize, clip: usize) -> Rc<[usize]> {
    let c = clip as i64;
    (0..n * n)
        .map(|k| {
            let delta = (k % n) as i64 - (k / n) as i64;
            (delta.clamp(-c, c) + c) as usize
        })
        .collect()
}

/// Learned absolute position embeddings added to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsPositionTable {
    pub table: Tensor,
}

impl AbsPositionTable {
    pub fn new(max_position: usize, d_model: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self {
            table: Tensor::randn(&[max_position, d_model], INIT_STD, &mut rng),
        }
    }

    pub fn max_position(&self) -> usize {
        self.table.rows()
    }

    pub fn pape_lookup(&self, pos: usize) -> Result<&[f64]> {
        check_position(pos, self.max_position())?;
        Ok(self.table.row(pos))
    }
}

pub(crate) fn check_position(pos: usize, max_position: usize) -> Result<()> {
    if pos >= max_position {
        return Err(Error::OutOfRange {
            what: "absolute position",
            index: pos,
            limit: max_position,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frpe_examples() {
        assert_eq!(frpe_vector(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let v = frpe_vector(1, 2).unwrap();
        // mpmath, 50 digits
        assert!((v[0] - 0.8414709848078965).abs() < 1e-15);
        assert!((v[1] - 0.5403023058681398).abs() < 1e-15);
        let (a, b) = (frpe_vector(-5, 8).unwrap(), frpe_vector(5, 8).unwrap());
        for k in 0..4 {
            assert_eq!(a[2 * k], -b[2 * k]);
            assert_eq!(a[2 * k + 1], b[2 * k + 1]);
        }
        assert!(frpe_vector(3, 5).is_err());
    }

    #[test]
    fn table_rows_match_closed_form() {
        let t = build_rel_table(3, 4, EncodingScheme::Frpe, 0).unwrap();
        assert_eq!(t.num_rows(), 5);
        let RelBanks::Fixed { table, .. } = &t.banks else { panic!() };
        for (r, delta) in (-2i64..=2).enumerate() {
            assert_eq!(table.row(r), frpe_vector(delta, 4).unwrap().as_slice());
        }
        let single = build_rel_table(1, 4, EncodingScheme::Frpe, 0).unwrap();
        assert_eq!(single.num_rows(), 1);
    }

    #[test]
    fn wrong_constructor() {
        assert!(build_rel_table(4, 4, EncodingScheme::Pape { max_position: 4 }, 0).is_err());
        assert!(build_rel_table(4, 4, EncodingScheme::None, 0).is_err());
        assert!(build_rel_table(0, 4, EncodingScheme::Frpe, 0).is_err());
    }

    #[test]
    fn lookups() {
        let t = build_rel_table(32, 8, EncodingScheme::Frpe, 0).unwrap();
        assert_eq!(t.rel_lookup(4, 4, Role::Key), frpe_vector(0, 8).unwrap());
        assert_eq!(t.rel_lookup(0, 40, Role::Value), frpe_vector(40, 8).unwrap());
        assert_eq!(t.rel_lookup(3, 9, Role::Key), t.rel_lookup(10, 16, Role::Key));

        let p = build_rel_table(8, 4, EncodingScheme::Prpe { clip: 2 }, 7).unwrap();
        assert_eq!(p.rel_lookup(0, 7, Role::Key), p.rel_lookup(0, 2, Role::Key));
        assert_ne!(p.rel_lookup(0, 1, Role::Key), p.rel_lookup(0, 1, Role::Value));
        assert_eq!(p.num_rows(), 5);
    }

    #[test]
    fn covering_grows_fixed_tables_only() {
        let t = RelPositionTable::frpe(4, 4).unwrap();
        assert!(matches!(t.covering(3), Cow::Borrowed(_)));
        let grown = t.covering(9);
        assert_eq!(grown.num_rows(), 17);
        assert!(t.index_matrix(9).is_err());
        assert_eq!(grown.index_matrix(9).unwrap().len(), 81);
    }

    #[test]
    fn pape_bounds() {
        let a = AbsPositionTable::new(6, 4, 1);
        assert_eq!(a.pape_lookup(0).unwrap(), a.table.row(0));
        assert!(matches!(
            a.pape_lookup(6),
            Err(Error::OutOfRange { index: 6, limit: 6, .. })
        ));
    }

    #[test]
    fn scheme_parsing() {
        for k in SchemeKind::ALL {
            assert_eq!(k.to_string().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("rope".parse::<SchemeKind>().is_err());
    }
}
