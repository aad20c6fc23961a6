//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW update in place.
///
/// `decay[i]` selects whether parameter `i` receives weight decay. Decay is
/// applied to the parameter directly, never through the moments.
pub fn adamw_step<T: Float>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() || decay.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len(), decay.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));

    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] {
            T::from_f64(1.0 - lr * cfg.weight_decay)
        } else {
            T::ONE
        };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let mhat = m[j].to_f64() / bc1;
            let vhat = v[j].to_f64() / bc2;
            *w = *w * shrink - T::from_f64(lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}
