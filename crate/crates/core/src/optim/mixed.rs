//! One optimizer step under a [`PrecisionPolicy`].

use crate::error::{Error, Result};
use crate::numerics::{Arith, Gradients, ParamStore};
use crate::optim::optimizer::Optimizer;
use crate::optim::precision::{PrecisionMode, PrecisionPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub skipped: bool,
}

/// Runs forward/backward through `eval` and updates the master weights in
/// `params`.
///
/// `eval(params, arith, seed)` must return the unscaled loss and the
/// gradients of `seed · loss`. In mixed mode the tape rounds the working
/// weights and every intermediate to binary16; gradients are widened and
/// unscaled here before the full-precision update.
pub fn mixed_precision_step<F>(
    policy: &PrecisionPolicy,
    params: &mut ParamStore,
    optimizer: &mut Optimizer,
    lr: f64,
    mut eval: F,
) -> Result<StepOutcome>
where
    F: FnMut(&ParamStore, Arith, f64) -> Result<(f64, Gradients)>,
{
    match policy.mode {
        PrecisionMode::Full => {
            let (loss, grads) = eval(params, Arith::Full, 1.0)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "loss",
                    index: 0,
                    value: loss,
                });
            }
            optimizer.step(params, &grads, lr)?;
            Ok(StepOutcome {
                loss,
                skipped: false,
            })
        }
        PrecisionMode::MixedEmulated => {
            let scale = policy.loss_scale;
            let (loss, mut grads) = eval(params, Arith::HalfEmulated, scale)?;
            grads.scale(1.0 / scale);
            if !grads.all_finite() || !loss.is_finite() {
                if policy.skip_on_overflow {
                    return Ok(StepOutcome { loss, skipped: true });
                }
                return Err(Error::Invariant(format!(
                    "gradient overflow at loss scale {scale} with skipping disabled"
                )));
            }
            optimizer.step(params, &grads, lr)?;
            Ok(StepOutcome {
                loss,
                skipped: false,
            })
        }
    }
}
