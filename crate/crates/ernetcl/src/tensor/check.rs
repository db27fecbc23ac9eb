//! Central finite-difference gradient verification.

use crate::error::{Error, Result};

use super::{Graph, Tensor, TensorId};

/// Compare analytic gradients against central finite differences.
///
/// `f` rebuilds the scalar objective on a fresh graph from leaves mounted in
/// the order of `params`. Returns the max over all parameter entries of
/// `|g_analytic - g_fd| / max(1, |g_fd|)`.
///
/// `f` must be deterministic; any stochastic op must use a frozen mask. A
/// pair of base evaluations guards against that, and a non-positive step `h`
/// is rejected.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Range(format!("finite-difference step must be > 0, got {h}")));
    }
    if params.is_empty() {
        return Err(Error::Empty("finite_diff_check needs at least one parameter".into()));
    }

    let eval = |f: &mut F, tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&mut g, &ids)?;
        if !g.value(root).is_scalar() {
            return Err(Error::Rank(format!(
                "objective must be scalar, got shape {:?}",
                g.value(root).shape()
            )));
        }
        Ok(g.value(root).values()[0])
    };

    let base: Vec<Tensor> = params
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            t
        })
        .collect();

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = base.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &ids)?;
    if !g.value(root).is_scalar() {
        return Err(Error::Rank(format!(
            "objective must be scalar, got shape {:?}",
            g.value(root).shape()
        )));
    }
    let v0 = g.value(root).values()[0];
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("backward fills every leaf").to_vec())
        .collect();
    drop(g);

    if eval(&mut f, &base)?.to_bits() != v0.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut worst = 0.0f64;
    let mut perturbed = base.clone();
    for (k, tensor) in base.iter().enumerate() {
        for i in 0..tensor.numel() {
            let orig = tensor.values()[i];
            perturbed[k].values_mut()[i] = orig + h;
            let plus = eval(&mut f, &perturbed)?;
            perturbed[k].values_mut()[i] = orig - h;
            let minus = eval(&mut f, &perturbed)?;
            perturbed[k].values_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (analytic[k][i] - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
