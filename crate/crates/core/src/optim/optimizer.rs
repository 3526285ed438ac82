//! LAMB and Adam over named parameter blocks.
//!
//! Both share the bias-corrected moment recursions
//!
//! ```text
//! m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
//! r = m̂ / (√v̂ + ε)           u = r + λ·w
//! ```
//!
//! Adam applies `Δw = −lr·u`; LAMB rescales each block by the trust ratio
//! `‖w‖/‖u‖` (1 when either norm is zero).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Lamb,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Layer-norm parameters and biases get no weight decay and no trust
    /// scaling.
    pub exclude_norm_and_bias: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            exclude_norm_and_bias: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Moments for every block in store order, plus the global step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// What happened to one block during a step.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockUpdate {
    pub id: ParamId,
    pub weight_norm: f64,
    pub direction_norm: f64,
    pub trust: f64,
    pub update_norm: f64,
}

pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        Self {
            config,
            state: OptimizerState::new(params),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
    ) -> Result<Vec<BlockUpdate>> {
        match self.config.kind {
            OptimizerKind::Lamb => lamb_step(&mut self.state, &self.config, params, grads, lr),
            OptimizerKind::Adam => adam_step(&mut self.state, &self.config, params, grads, lr),
        }
    }
}

pub fn lamb_step(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    params: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
) -> Result<Vec<BlockUpdate>> {
    adaptive_step(state, cfg, params, grads, lr, true)
}

pub fn adam_step(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    params: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
) -> Result<Vec<BlockUpdate>> {
    adaptive_step(state, cfg, params, grads, lr, false)
}

fn adaptive_step(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    params: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    trust_scaling: bool,
) -> Result<Vec<BlockUpdate>> {
    if state.m.len() != params.len() {
        return Err(Error::Invariant(format!(
            "optimizer tracks {} blocks, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter() {
        if let Some((index, value)) = g.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                param: params.get(id).name.clone(),
                index,
                value,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut report = Vec::with_capacity(params.len());
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let exempt = cfg.exclude_norm_and_bias && params.get(id).no_decay;
        let decay = if exempt { 0.0 } else { cfg.weight_decay };
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let w = params.get_mut(id).value.data_mut();
        let zero;
        let g = match grads.get(id) {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; w.len()];
                &zero
            }
        };
        let mut u = vec![0.0; w.len()];
        for k in 0..w.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            u[k] = m_hat / (v_hat.sqrt() + cfg.eps) + decay * w[k];
        }
        let weight_norm = l2(w);
        let direction_norm = l2(&u);
        let trust = if trust_scaling && !exempt && weight_norm > 0.0 && direction_norm > 0.0 {
            weight_norm / direction_norm
        } else {
            1.0
        };
        let scale = lr * trust;
        for k in 0..w.len() {
            w[k] -= scale * u[k];
        }
        report.push(BlockUpdate {
            id,
            weight_norm,
            direction_norm,
            trust,
            update_norm: scale * direction_norm,
        });
    }
    Ok(report)
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w), false).unwrap();
        (s, id)
    }

    fn grads(id: ParamId, g: f64) -> Gradients {
        let mut gr = Gradients::new();
        gr.accumulate(id, &[g], &[1], 1.0);
        gr
    }

    fn no_decay() -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gradient_means_no_update() {
        for kind in [OptimizerKind::Lamb, OptimizerKind::Adam] {
            let (mut s, id) = scalar_store(0.7);
            let mut opt = Optimizer::new(OptimizerConfig { kind, ..no_decay() }, &s);
            opt.step(&mut s, &grads(id, 0.0), 0.1).unwrap();
            assert_eq!(s.value(id).data(), &[0.7]);
            assert_eq!(opt.state.step, 1);
        }
    }

    #[test]
    fn first_scalar_step_by_hand() {
        let lr = 0.01;
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Optimizer::new(no_decay(), &s);
        opt.step(&mut s, &grads(id, 1.0), lr).unwrap();
        assert!((s.value(id).data()[0] - (1.0 - lr)).abs() < 1e-12);

        let (mut s, id) = scalar_store(1.0);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..no_decay()
        };
        let mut opt = Optimizer::new(cfg, &s);
        opt.step(&mut s, &grads(id, 1.0), lr).unwrap();
        let expected = 1.0 - lr * (1.0 / (1.0 + 1e-6));
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Optimizer::new(no_decay(), &s);
        assert!(opt.step(&mut s, &grads(id, f64::NAN), 0.1).is_err());
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn exempt_blocks_skip_trust_and_decay() {
        let mut s = ParamStore::new();
        let id = s.add("ln.gamma", Tensor::scalar(4.0), true).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default(), &s);
        let report = opt.step(&mut s, &grads(id, 1.0), 0.01).unwrap();
        assert_eq!(report[0].trust, 1.0);
        let expected = 4.0 - 0.01 * (1.0 / (1.0 + 1e-6));
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }
}
