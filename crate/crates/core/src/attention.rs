//! Multi-head self-attention with optional relative-position terms.
//!
//! With a relative table the score and output of each head become
//!
//! ```text
//! e_ij = q_i · (k_j + aᴷ_ij) / √d_z
//! z_i  = Σ_j α_ij (v_j + aⱽ_ij)
//! ```
//!
//! and without one they reduce to plain scaled dot-product attention. The
//! same table is used by every head.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::posenc::{RelBanks, RelPositionTable, Role, SchemeKind};

/// Additive surrogate for −∞ on masked key positions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub d_model: usize,
    pub scheme: SchemeKind,
    pub attention_dropout: f64,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, d_model: usize, scheme: SchemeKind) -> Self {
        Self {
            num_heads,
            d_model,
            scheme,
            attention_dropout: 0.0,
        }
    }

    pub fn d_z(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.scheme == SchemeKind::Frpe && !self.d_z().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "FRPE needs an even per-head size, got {}",
                self.d_z()
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config("attention dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Projection weights of one attention block. Head `h` uses columns
/// `h·d_z .. (h+1)·d_z` of `query`, `key` and `value`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub output_bias: Tensor,
}

impl HeadWeights {
    pub fn random(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = crate::posenc::INIT_STD;
        Self {
            query: Tensor::randn(&[d_model, d_model], std, rng),
            key: Tensor::randn(&[d_model, d_model], std, rng),
            value: Tensor::randn(&[d_model, d_model], std, rng),
            output: Tensor::randn(&[d_model, d_model], std, rng),
            output_bias: Tensor::zeros(&[d_model]),
        }
    }
}

/// Handles to the projection weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub output_bias: Var,
}

impl HeadVars {
    pub fn inputs(tape: &mut Tape, w: &HeadWeights) -> Self {
        Self {
            query: tape.input(w.query.clone()),
            key: tape.input(w.key.clone()),
            value: tape.input(w.value.clone()),
            output: tape.input(w.output.clone()),
            output_bias: tape.input(w.output_bias.clone()),
        }
    }
}

/// Relative banks bound to a tape together with the offset index for one
/// sequence length.
#[derive(Clone, Debug)]
pub struct RelBinding {
    pub key: Var,
    pub value: Var,
    pub rows: usize,
    pub idx: Rc<[usize]>,
}

impl RelBinding {
    /// Binds a table as constants (FRPE, or PRPE in forward-only use).
    pub fn constant(tape: &mut Tape, table: &RelPositionTable, n: usize) -> Result<Self> {
        let table = table.covering(n);
        let idx = table.index_matrix(n)?;
        let (key, value) = match &table.banks {
            RelBanks::Fixed { table, .. } => {
                let v = tape.input(table.clone());
                (v, v)
            }
            RelBanks::Learned { key, value, .. } => (tape.input(key.clone()), tape.input(value.clone())),
        };
        Ok(Self {
            key,
            value,
            rows: table.num_rows(),
            idx,
        })
    }

    /// Binds learned banks that live in a parameter store.
    pub fn learned(
        tape: &mut Tape,
        store: &ParamStore,
        key: crate::numerics::ParamId,
        value: crate::numerics::ParamId,
        clip: usize,
        n: usize,
    ) -> Result<Self> {
        let idx = crate::posenc::clipped_index(n, clip);
        Ok(Self {
            key: tape.param(key, store),
            value: tape.param(value, store),
            rows: 2 * clip + 1,
            idx,
        })
    }
}

/// Attention-probability dropout with its own random stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn mask(&mut self, len: usize) -> Rc<[f64]> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect()
    }
}

/// Additive `n×n` mask: [`MASK_VALUE`] in every column whose key is invalid.
pub fn additive_mask(valid: &[bool]) -> Tensor {
    let n = valid.len();
    let mut data = vec![0.0; n * n];
    for row in data.chunks_mut(n) {
        for (j, ok) in valid.iter().enumerate() {
            if !ok {
                row[j] = MASK_VALUE;
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

fn check_table(table: Option<&RelPositionTable>, d_z: usize, op: &'static str) -> Result<()> {
    if let Some(t) = table {
        if t.d_z != d_z {
            return Err(Error::shape(op, format!("table d_z {} vs {d_z}", t.d_z)));
        }
    }
    Ok(())
}

/// Scores `e_ij` for already-projected queries and keys, masked columns
/// shifted by [`MASK_VALUE`].
pub fn attention_scores(
    q: &Tensor,
    k: &Tensor,
    table: Option<&RelPositionTable>,
    mask: &[bool],
) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape().len() != 2 {
        return Err(Error::shape(
            "attention_scores",
            format!("q {:?} vs k {:?}", q.shape(), k.shape()),
        ));
    }
    let (n, d_z) = (q.rows(), q.cols());
    if mask.len() != n {
        return Err(Error::shape("attention_scores", format!("mask of {} for {n}", mask.len())));
    }
    check_table(table, d_z, "attention_scores")?;
    let mut scores = q.matmul_t(k)?;
    if let Some(t) = table {
        let t = t.covering(n);
        for i in 0..n {
            for j in 0..n {
                let a = t.rel_lookup(i, j, Role::Key);
                let extra: f64 = q.row(i).iter().zip(&a).map(|(x, y)| x * y).sum();
                scores.row_mut(i)[j] += extra;
            }
        }
    }
    let inv = 1.0 / (d_z as f64).sqrt();
    let mut out = scores.scale(inv);
    for i in 0..n {
        for j in 0..n {
            if !mask[j] {
                out.row_mut(i)[j] += MASK_VALUE;
            }
        }
    }
    Ok(out)
}

/// `z_i = Σ_j α_ij (v_j + aⱽ_ij)`.
pub fn attention_output(
    alpha: &Tensor,
    v: &Tensor,
    table: Option<&RelPositionTable>,
) -> Result<Tensor> {
    let n = v.rows();
    if alpha.shape() != [n, n] {
        return Err(Error::shape(
            "attention_output",
            format!("alpha {:?} for {n} values", alpha.shape()),
        ));
    }
    check_table(table, v.cols(), "attention_output")?;
    let mut z = alpha.matmul(v)?;
    if let Some(t) = table {
        let t = t.covering(n);
        for i in 0..n {
            for j in 0..n {
                let a = t.rel_lookup(i, j, Role::Value);
                let w = alpha.get(i, j);
                z.row_mut(i).iter_mut().zip(&a).for_each(|(z, a)| *z += w * a);
            }
        }
    }
    Ok(z)
}

/// Records one multi-head attention block on `tape` and returns the
/// `n×d_model` output (before the residual connection).
pub fn attention_on_tape(
    tape: &mut Tape,
    x: Var,
    heads: &HeadVars,
    cfg: &AttentionConfig,
    rel: Option<&RelBinding>,
    mask: Option<&Tensor>,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let d_z = cfg.d_z();
    let q = tape.matmul(x, heads.query)?;
    let k = tape.matmul(x, heads.key)?;
    let v = tape.matmul(x, heads.value)?;
    let inv = 1.0 / (d_z as f64).sqrt();
    let mut outputs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * d_z, d_z)?;
        let kh = tape.slice_cols(k, h * d_z, d_z)?;
        let vh = tape.slice_cols(v, h * d_z, d_z)?;
        let mut scores = tape.matmul_t(qh, kh)?;
        if let Some(r) = rel {
            let per_offset = tape.matmul_t(qh, r.key)?;
            let gathered = tape.rel_gather(per_offset, r.idx.clone())?;
            scores = tape.add(scores, gathered)?;
        }
        scores = tape.scale(scores, inv);
        if let Some(m) = mask {
            scores = tape.add_const(scores, m)?;
        }
        let mut alpha = tape.softmax_rows(scores);
        if let Some(d) = dropout.as_deref_mut() {
            if d.rate > 0.0 {
                let len = tape.value(alpha).len();
                alpha = tape.dropout(alpha, d.mask(len))?;
            }
        }
        let mut z = tape.matmul(alpha, vh)?;
        if let Some(r) = rel {
            let weights = tape.rel_scatter(alpha, r.idx.clone(), r.rows)?;
            let rel_values = tape.matmul(weights, r.value)?;
            z = tape.add(z, rel_values)?;
        }
        outputs.push(z);
    }
    let merged = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let projected = tape.matmul(merged, heads.output)?;
    tape.add_row(projected, heads.output_bias)
}

/// Forward-only multi-head attention for a single sequence.
pub fn multi_head_attention(
    x: &Tensor,
    weights: &HeadWeights,
    cfg: &AttentionConfig,
    table: Option<&RelPositionTable>,
    mask: &[bool],
) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape().len() != 2 || x.cols() != cfg.d_model {
        return Err(Error::shape(
            "multi_head_attention",
            format!("input {:?} for d_model {}", x.shape(), cfg.d_model),
        ));
    }
    let n = x.rows();
    if mask.len() != n {
        return Err(Error::shape("multi_head_attention", "mask length"));
    }
    check_table(table, cfg.d_z(), "multi_head_attention")?;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let heads = HeadVars::inputs(&mut tape, weights);
    let rel = table
        .map(|t| RelBinding::constant(&mut tape, t, n))
        .transpose()?;
    let m = mask.iter().any(|v| !v).then(|| additive_mask(mask));
    let out = attention_on_tape(&mut tape, xv, &heads, cfg, rel.as_ref(), m.as_ref(), None)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posenc::{build_rel_table, EncodingScheme};
    use rand::SeedableRng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[rows, cols], 1.0, &mut rng)
    }

    #[test]
    fn zero_queries_give_zero_scores() {
        let q = Tensor::zeros(&[3, 4]);
        let k = rand_matrix(3, 4, 1);
        let t = build_rel_table(3, 4, EncodingScheme::Frpe, 0).unwrap();
        let s = attention_scores(&q, &k, Some(&t), &[true; 3]).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_position_score() {
        let q = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 1.0]).unwrap();
        let s = attention_scores(&q, &k, None, &[true]).unwrap();
        assert_eq!(s.data(), &[(0.5 - 2.0 + 6.0 + 4.0) / 2.0]);
    }

    #[test]
    fn identity_alpha_returns_values() {
        let v = rand_matrix(3, 4, 2);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.row_mut(i)[i] = 1.0;
        }
        assert_eq!(attention_output(&eye, &v, None).unwrap(), v);
    }

    #[test]
    fn uniform_alpha_zero_values_average_offsets() {
        let n = 4;
        let d = 6;
        let t = build_rel_table(n, d, EncodingScheme::Frpe, 0).unwrap();
        let alpha = Tensor::filled(&[n, n], 1.0 / n as f64);
        let z = attention_output(&alpha, &Tensor::zeros(&[n, d]), Some(&t)).unwrap();
        for i in 0..n {
            for c in 0..d {
                let mean: f64 = (0..n)
                    .map(|j| crate::posenc::frpe_vector(j as i64 - i as i64, d).unwrap()[c])
                    .sum::<f64>()
                    / n as f64;
                assert!((z.get(i, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = rand_matrix(3, 4, 3);
        let k = rand_matrix(2, 4, 4);
        assert!(attention_scores(&q, &k, None, &[true; 3]).is_err());
        let t = build_rel_table(3, 6, EncodingScheme::Frpe, 0).unwrap();
        assert!(attention_scores(&q, &q, Some(&t), &[true; 3]).is_err());
        let cfg = AttentionConfig::new(3, 8, SchemeKind::None);
        assert!(cfg.validate().is_err());
        let cfg = AttentionConfig::new(2, 6, SchemeKind::Frpe);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn masked_position_content_does_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let w = HeadWeights::random(d, &mut rng);
        let cfg = AttentionConfig::new(2, d, SchemeKind::Frpe);
        let t = build_rel_table(3, 4, EncodingScheme::Frpe, 0).unwrap();
        let x1 = rand_matrix(3, d, 10);
        let mut x2 = x1.clone();
        x2.row_mut(2).iter_mut().for_each(|v| *v = 100.0);
        let mask = [true, true, false];
        let a = multi_head_attention(&x1, &w, &cfg, Some(&t), &mask).unwrap();
        let b = multi_head_attention(&x2, &w, &cfg, Some(&t), &mask).unwrap();
        for i in 0..2 {
            assert_eq!(a.row(i), b.row(i));
        }
    }
}
