//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore};

/// How the numeric derivative is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMethod {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central,
    /// Central differences at geometrically shrinking steps starting from
    /// `step`, combined by Richardson extrapolation (Ridders). Resolves
    /// gradients far below the plain central-difference noise floor.
    Ridders,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub method: DiffMethod,
    /// Step for `Central`; initial step for `Ridders`.
    pub step: f64,
    /// Coordinates checked per parameter block; smaller blocks are checked
    /// exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            method: DiffMethod::Ridders,
            step: 1e-2,
            samples_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }

    /// Blocks sorted by decreasing error.
    pub fn worst(&self, k: usize) -> Vec<&ParamCheck> {
        let mut v: Vec<_> = self.params.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(k);
        v
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `grad_fn` against central differences of `loss_fn` on sampled
/// coordinates of every parameter block. `params` is restored on return.
pub fn check_gradients<L, G>(
    params: &mut ParamStore,
    loss_fn: L,
    grad_fn: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<Gradients>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step {} must be positive", opts.step)));
    }
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Invariant(format!(
            "loss function is not deterministic: {base} then {again}"
        )));
    }
    let grads = grad_fn(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(params.len());
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = grads.get_or_zeros(id, params);
        let len = analytic.len();
        let coords: Vec<usize> = if len <= opts.samples_per_param {
            (0..len).collect()
        } else {
            let mut picked = sample(&mut rng, len, opts.samples_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_abs_grad: 0.0,
        };
        for &c in &coords {
            let original = params.value(id).data()[c];
            let mut central = |h: f64| -> Result<f64> {
                params.get_mut(id).value.data_mut()[c] = original + h;
                let plus = loss_fn(params);
                params.get_mut(id).value.data_mut()[c] = original - h;
                let minus = loss_fn(params);
                params.get_mut(id).value.data_mut()[c] = original;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = match opts.method {
                DiffMethod::Central => central(opts.step)?,
                DiffMethod::Ridders => ridders(&mut central, opts.step)?,
            };
            let a = analytic.data()[c];
            let err = relative_error(a, numeric);
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = c;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
    })
}

/// Ridders' extrapolation of `central(h)` towards h = 0: a Neville tableau
/// over steps shrinking by 1.4, returning the entry with the smallest
/// estimated error and stopping once higher orders get worse.
fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 10;
    const SAFE: f64 = 2.0;
    let shrink2 = SHRINK * SHRINK;
    let mut h = h0;
    let mut prev: Vec<f64> = vec![central(h)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for _ in 1..ROWS {
        h /= SHRINK;
        let mut row = Vec::with_capacity(prev.len() + 1);
        row.push(central(h)?);
        let mut fac = shrink2;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        let k = row.len() - 1;
        if (row[k] - prev[k - 1]).abs() >= SAFE * err {
            break;
        }
        prev = row;
    }
    Ok(best)
}
