//! SGD and AdamW parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

use super::ModelParams;

/// AdamW hyperparameters. Defaults: betas (0.9, 0.999), eps 1e-8, no decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyperParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyperParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates, one tensor per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub step: u64,
    pub first_moment: ModelParams<S>,
    pub second_moment: ModelParams<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

fn check_grads_finite<S: Scalar>(grads: &ModelParams<S>) -> Result<()> {
    grads.check_finite("gradients")
}

/// Plain SGD: `p -= lr * g`.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &ModelParams<S>,
    lr: f64,
) -> Result<()> {
    check_grads_finite(grads)?;
    let lr = S::from_f64(lr);
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (pv, &gv) in p.iter_mut().zip(g) {
            *pv = *pv - lr * gv;
        }
    }
    Ok(())
}

/// AdamW with bias correction. Weight decay is decoupled (applied directly to
/// the parameters), matching the usual AdamW formulation.
pub fn adamw_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &ModelParams<S>,
    state: &mut AdamState<S>,
    lr: f64,
    hyper: &AdamHyperParams,
) -> Result<()> {
    check_grads_finite(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let beta1 = S::from_f64(hyper.beta1);
    let beta2 = S::from_f64(hyper.beta2);
    let one = S::one();
    let bias1 = S::from_f64(1.0 - hyper.beta1.powi(t));
    let bias2 = S::from_f64(1.0 - hyper.beta2.powi(t));
    let eps = S::from_f64(hyper.eps);
    let lr_s = S::from_f64(lr);
    let decay = S::from_f64(lr * hyper.weight_decay);

    let mut m_tensors = state.first_moment.tensors_mut();
    let mut v_tensors = state.second_moment.tensors_mut();
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m_tensors.iter_mut().zip(v_tensors.iter_mut()))
    {
        for (i, (pv, &gv)) in p.iter_mut().zip(g).enumerate() {
            m[i] = beta1 * m[i] + (one - beta1) * gv;
            v[i] = beta2 * v[i] + (one - beta2) * gv * gv;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *pv = *pv - lr_s * m_hat / (v_hat.sqrt() + eps) - decay * *pv;
        }
    }
    Ok(())
}

/// The optimizer a training run uses.
#[derive(Debug, Clone)]
pub enum Optimizer<S> {
    Sgd,
    AdamW {
        hyper: AdamHyperParams,
        state: Box<AdamState<S>>,
    },
}

impl<S: Scalar> Optimizer<S> {
    pub fn adamw(params: &ModelParams<S>) -> Self {
        Optimizer::AdamW {
            hyper: AdamHyperParams::default(),
            state: Box::new(AdamState::new(params)),
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &ModelParams<S>,
        lr: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::AdamW { hyper, state } => adamw_step(params, grads, state, lr, hyper),
        }
    }

    pub fn adam_state(&self) -> Option<&AdamState<S>> {
        match self {
            Optimizer::AdamW { state, .. } => Some(state),
            Optimizer::Sgd => None,
        }
    }
}
