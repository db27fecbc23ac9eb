//! Stateless neural building blocks shared by both encoders.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{alloc, Graph, Init, Tensor, TensorId};

/// Train/eval switch. Eval disables every stochastic op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights of an affine map, `weight: [out_dim, in_dim]`, `bias: [out_dim]`.
///
/// Generic over the leaf type so the same struct describes stored tensors
/// (`AffineParams<Tensor>`) and their graph bindings
/// (`AffineParams<TensorId>`).
#[derive(Debug, Clone)]
pub struct AffineParams<T> {
    pub weight: T,
    pub bias: T,
}

impl AffineParams<Tensor> {
    /// Scaled-uniform weight by fan-in, zero bias.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(AffineParams {
            weight: alloc(&[out_dim, in_dim], Init::ScaledUniform { fan_in: in_dim }, rng)?,
            bias: Tensor::zeros(&[out_dim])?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T> AffineParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AffineParams<U> {
        AffineParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// Layer-normalization parameters over a trailing extent `d`.
#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
    pub eps: f64,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl NormParams<Tensor> {
    pub fn init(dim: usize) -> Result<Self> {
        Ok(NormParams {
            gain: Tensor::new(vec![dim], vec![1.0; dim])?,
            bias: Tensor::zeros(&[dim])?,
            eps: DEFAULT_LN_EPS,
        })
    }
}

impl<T> NormParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
            eps: self.eps,
        }
    }
}

/// `y = x W^T + b` along the trailing axis of a rank-2 `x`.
pub fn linear(g: &mut Graph, x: TensorId, p: &AffineParams<TensorId>) -> Result<TensorId> {
    let wt = g.transpose(p.weight)?;
    let y = g.matmul(x, wt)?;
    g.add(y, p.bias)
}

/// Per-row standardization then gain/bias, along the trailing axis.
pub fn layer_norm(g: &mut Graph, x: TensorId, p: &NormParams<TensorId>) -> Result<TensorId> {
    g.layer_norm(x, p.gain, p.bias, p.eps)
}

/// Inverted dropout: eval mode is a bitwise identity, train mode zeroes each
/// entry with probability `rate` and scales survivors by `1/(1-rate)`.
pub fn dropout<R: Rng>(
    g: &mut Graph,
    x: TensorId,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<TensorId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Range(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = g.constant(&shape, mask)?;
    g.mul(x, mask)
}

pub fn softmax(g: &mut Graph, x: TensorId) -> TensorId {
    g.softmax(x)
}

pub fn sigmoid(g: &mut Graph, x: TensorId) -> TensorId {
    g.sigmoid(x)
}

pub fn tanh(g: &mut Graph, x: TensorId) -> TensorId {
    g.tanh(x)
}
