//! Dense tensors and the per-batch reverse-mode computation graph.
//!
//! Everything is stored row-major in `f64`. A [`Graph`] records every
//! operation executed during a forward pass; [`Graph::backward`] then fills
//! per-node gradients in reverse order and discards nothing until the graph
//! itself is dropped, which happens once per batch.

mod check;
mod graph;

pub use check::finite_diff_check;
pub use graph::{stable_sigmoid, Graph, TensorId};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense multi-dimensional real array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Initialization policy for [`alloc`].
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Uniform { lo: f64, hi: f64 },
    /// Uniform in +-1/sqrt(fan_in).
    ScaledUniform { fan_in: usize },
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::InvalidShape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Allocate a tensor under the given initialization policy.
///
/// Deterministic for a given rng state; `Zeros` does not consume the rng.
pub fn alloc<R: Rng>(shape: &[usize], init: Init, rng: &mut R) -> Result<Tensor> {
    validate_shape(shape)?;
    let numel: usize = shape.iter().product();
    let values = match init {
        Init::Zeros => vec![0.0; numel],
        Init::Uniform { lo, hi } => {
            if lo.is_nan() || hi.is_nan() || lo >= hi {
                return Err(Error::Range(format!("uniform bounds [{lo}, {hi}) empty")));
            }
            (0..numel).map(|_| rng.gen_range(lo..hi)).collect()
        }
        Init::ScaledUniform { fan_in } => {
            if fan_in == 0 {
                return Err(Error::InvalidShape("fan_in must be positive".into()));
            }
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..numel).map(|_| rng.gen_range(-b..b)).collect()
        }
    };
    Ok(Tensor {
        shape: shape.to_vec(),
        values,
        requires_grad: false,
        grad: None,
    })
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one extent".into()));
    }
    if let Some(&e) = shape.iter().find(|&&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "extent {e} in shape {shape:?} must be >= 1"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alloc_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = alloc(&[2, 3], Init::Zeros, &mut rng).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.values(), &[0.0; 6]);
    }

    #[test]
    fn alloc_uniform_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(2023);
        let mut b = ChaCha8Rng::seed_from_u64(2023);
        let ta = alloc(&[4], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut a).unwrap();
        let tb = alloc(&[4], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut b).unwrap();
        assert_eq!(ta.values(), tb.values());
    }

    #[test]
    fn alloc_scaled_uniform_bound() {
        // Bound checked against the sampling rule directly: every draw must
        // stay inside +-1/sqrt(fan_in).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = alloc(&[3, 3], Init::ScaledUniform { fan_in: 3 }, &mut rng).unwrap();
        let b = 1.0 / 3f64.sqrt();
        assert!(t.values().iter().all(|&v| v > -b && v < b));
    }

    #[test]
    fn alloc_rejects_zero_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            alloc(&[2, 0], Init::Zeros, &mut rng),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            alloc(&[], Init::Zeros, &mut rng),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn tensor_new_checks_numel() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }
}
