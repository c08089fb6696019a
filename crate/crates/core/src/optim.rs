//! SGD with momentum over any [`Tensors`] parameter set.

use crate::nn::Tensors;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// One buffer per parameter tensor, in [`Tensors`] order.
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new<P: Tensors + ?Sized>(params: &P, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            velocity: params.tensor_lens().into_iter().map(|n| vec![0.0; n]).collect(),
            lr,
            momentum,
        })
    }
}

/// `v <- momentum * v + scale * grad; param <- param - lr * v`.
///
/// `scale` carries the gradient modulation coefficient; pass 1 for plain SGD.
/// Any noise must already be folded into `grads`.
pub fn sgd_momentum_step<P, G>(
    params: &mut P,
    grads: &G,
    state: &mut OptimizerState,
    scale: f64,
) -> Result<()>
where
    P: Tensors + ?Sized,
    G: Tensors + ?Sized,
{
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("gradient scale must be finite and >= 0, got {scale}")));
    }
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::contract(format!(
            "{} parameter tensors, {} gradient tensors, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (t, (g, v)) in grads.iter().zip(&state.velocity).enumerate() {
        if g.len() != params[t].len() || v.len() != params[t].len() {
            return Err(Error::contract(format!("tensor {t} has mismatched lengths")));
        }
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient tensor {t} entry {pos} is {}",
                g[pos]
            )));
        }
    }
    let (lr, mu) = (state.lr, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vv = mu * *vv + scale * gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
