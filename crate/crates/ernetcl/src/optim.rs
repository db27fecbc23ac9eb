//! AdamW: bias-corrected Adam moments with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment accumulators mirroring the parameter layout, plus
/// the shared step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<Tensor>) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.numel()]));
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One update over gradients listed in parameter visit order. Decay is
/// decoupled: `theta -= lr * lambda * theta` on top of the Adam step.
pub fn adamw_step(
    opt: &AdamW,
    params: &mut ModelParams<Tensor>,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step tensors",
            lhs: vec![state.m.len()],
            rhs: vec![grads.len()],
        });
    }
    state.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.step as i32);
    let mut idx = 0;
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let grad = &grads[idx];
        if grad.len() != tensor.numel() {
            failure = Some(Error::ShapeMismatch {
                op: "adamw_step grad",
                lhs: vec![tensor.numel()],
                rhs: vec![grad.len()],
            });
            let _ = name;
            return;
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (((theta, &g), mi), vi) in tensor
            .values_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * g;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
            *theta -= opt.learning_rate * opt.weight_decay * *theta;
        }
        idx += 1;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
