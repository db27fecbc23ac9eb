//! Spatial encoder: full self-attention across all utterances of a
//! conversation (every utterance attends to every other, no positional
//! encoding), dropout, residual sum, and layer normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, AffineParams, Mode, NormParams};
use crate::tensor::{alloc, Graph, Init, Tensor, TensorId};

/// Pre-softmax score for masked key positions. A large negative constant
/// rather than -inf keeps gradients finite; exp underflows to exactly zero
/// after max subtraction.
const MASK_SCORE: f64 = -1e9;

/// Per-head query/key/value projections `[d_k, d]` (bias-free) and the
/// output projection `[d, H*d_k]` with bias.
#[derive(Debug, Clone)]
pub struct MhaParams<T> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub out_proj: AffineParams<T>,
}

#[derive(Debug, Clone)]
pub struct SeLayerParams<T> {
    pub mha: MhaParams<T>,
    pub norm: NormParams<T>,
    pub dropout_rate: f64,
}

impl MhaParams<Tensor> {
    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "head count {heads} must divide model dim {dim}"
            )));
        }
        let dk = dim / heads;
        let proj = |rng: &mut R| alloc(&[dk, dim], Init::ScaledUniform { fan_in: dim }, rng);
        let mut query = Vec::with_capacity(heads);
        let mut key = Vec::with_capacity(heads);
        let mut value = Vec::with_capacity(heads);
        for _ in 0..heads {
            query.push(proj(rng)?);
            key.push(proj(rng)?);
            value.push(proj(rng)?);
        }
        Ok(MhaParams {
            query,
            key,
            value,
            out_proj: AffineParams::init(dim, dim, rng)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn head_dim(&self) -> usize {
        self.query[0].shape()[0]
    }
}

impl<T> MhaParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, t) in self.query.iter().enumerate() {
            f(format!("{prefix}.q{i}"), t);
        }
        for (i, t) in self.key.iter().enumerate() {
            f(format!("{prefix}.k{i}"), t);
        }
        for (i, t) in self.value.iter().enumerate() {
            f(format!("{prefix}.v{i}"), t);
        }
        self.out_proj.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (i, t) in self.query.iter_mut().enumerate() {
            f(format!("{prefix}.q{i}"), t);
        }
        for (i, t) in self.key.iter_mut().enumerate() {
            f(format!("{prefix}.k{i}"), t);
        }
        for (i, t) in self.value.iter_mut().enumerate() {
            f(format!("{prefix}.v{i}"), t);
        }
        self.out_proj.visit_mut(&format!("{prefix}.out"), f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MhaParams<U> {
        MhaParams {
            query: self.query.iter().map(&mut *f).collect(),
            key: self.key.iter().map(&mut *f).collect(),
            value: self.value.iter().map(&mut *f).collect(),
            out_proj: self.out_proj.map(f),
        }
    }
}

impl SeLayerParams<Tensor> {
    pub fn init<R: Rng>(dim: usize, heads: usize, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        Ok(SeLayerParams {
            mha: MhaParams::init(dim, heads, rng)?,
            norm: NormParams::init(dim)?,
            dropout_rate,
        })
    }
}

impl<T> SeLayerParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.mha.visit(&format!("{prefix}.mha"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.mha.visit_mut(&format!("{prefix}.mha"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SeLayerParams<U> {
        SeLayerParams {
            mha: self.mha.map(f),
            norm: self.norm.map(f),
            dropout_rate: self.dropout_rate,
        }
    }
}

fn mask_bias(g: &mut Graph, l: usize, mask: &[bool]) -> Result<TensorId> {
    let mut bias = vec![0.0; l * l];
    for j in 0..l {
        if !mask[j] {
            for i in 0..l {
                bias[i * l + j] = MASK_SCORE;
            }
        }
    }
    g.constant(&[l, l], bias)
}

/// Scaled dot-product attention over `[L, d_k]` queries/keys/values. Key
/// positions with a false mask entry are unreachable.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: &[bool],
) -> Result<TensorId> {
    let qs = g.value(q).shape().to_vec();
    let ks = g.value(k).shape().to_vec();
    let vs = g.value(v).shape().to_vec();
    if qs.len() != 2 || qs != ks || ks != vs {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (l, dk) = (qs[0], qs[1]);
    if mask.len() != l {
        return Err(Error::ShapeMismatch {
            op: "attention mask",
            lhs: vec![l],
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyAttention);
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let scores = if mask.iter().all(|&m| m) {
        scores
    } else {
        let bias = mask_bias(g, l, mask)?;
        g.add(scores, bias)?
    };
    let weights = g.softmax(scores);
    g.matmul(weights, v)
}

/// Multi-head self-attention: per-head scaled dot-product attention over the
/// head projections of `x: [L, d]`, heads concatenated and sent through the
/// output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    x: TensorId,
    mask: &[bool],
    p: &MhaParams<TensorId>,
) -> Result<TensorId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Rank(format!("mha expects [L, d], got {shape:?}")));
    }
    let d = shape[1];
    let heads = p.query.len();
    let dk = g.value(p.query[0]).shape()[0];
    if heads == 0 || dk * heads != d {
        return Err(Error::Config(format!(
            "head count {heads} with head dim {dk} does not tile model dim {d}"
        )));
    }
    let mut concat: Option<TensorId> = None;
    for i in 0..heads {
        let qt = g.transpose(p.query[i])?;
        let kt = g.transpose(p.key[i])?;
        let vt = g.transpose(p.value[i])?;
        let q = g.matmul(x, qt)?;
        let k = g.matmul(x, kt)?;
        let v = g.matmul(x, vt)?;
        let head = scaled_dot_attention(g, q, k, v, mask)?;
        concat = Some(match concat {
            None => head,
            Some(acc) => g.concat(acc, head, 1)?,
        });
    }
    nn::linear(g, concat.expect("at least one head"), &p.out_proj)
}

/// One spatial-encoder layer: layer-norm of the input plus the dropped-out
/// attention output. Rows with a false mask entry are excluded from
/// attention and forced to zero in the output.
pub fn se_layer<R: Rng>(
    g: &mut Graph,
    x: TensorId,
    mask: &[bool],
    p: &SeLayerParams<TensorId>,
    mode: Mode,
    rng: &mut R,
) -> Result<TensorId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Rank(format!("se_layer expects [L, d], got {shape:?}")));
    }
    let (l, d) = (shape[0], shape[1]);
    let attended = multi_head_attention(g, x, mask, &p.mha)?;
    let dropped = nn::dropout(g, attended, p.dropout_rate, mode, rng)?;
    let residual = g.add(x, dropped)?;
    let normed = nn::layer_norm(g, residual, &p.norm)?;
    if mask.iter().all(|&m| m) {
        Ok(normed)
    } else {
        let mut keep = vec![0.0; l * d];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                keep[i * d..(i + 1) * d].fill(1.0);
            }
        }
        let keep = g.constant(&[l, d], keep)?;
        g.mul(normed, keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(&[1, 2], vec![0.3, -0.7]).unwrap();
        let k = g.constant(&[1, 2], vec![5.0, 1.0]).unwrap();
        let v = g.constant(&[1, 2], vec![2.5, -1.5]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v, &[true]).unwrap();
        assert_eq!(g.value(out).values(), &[2.5, -1.5]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut g = Graph::new();
        let q = g.constant(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = g.constant(&[3, 1], vec![0.5, 0.5, 0.5]).unwrap();
        let v = g.constant(&[3, 1], vec![3.0, 6.0, 9.0]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v, &[true, true, true]).unwrap();
        for &o in g.value(out).values() {
            assert!((o - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_position_hand_oracle() {
        // Scalar arithmetic done independently of the graph kernels.
        let (q, k, v) = (
            [0.2, -0.4, 1.0, 0.3],
            [0.7, 0.1, -0.2, 0.5],
            [1.0, 2.0, -3.0, 4.0],
        );
        let dk = 2.0f64;
        let mut expected = [0.0; 4];
        for i in 0..2 {
            let s0 = (q[2 * i] * k[0] + q[2 * i + 1] * k[1]) / dk.sqrt();
            let s1 = (q[2 * i] * k[2] + q[2 * i + 1] * k[3]) / dk.sqrt();
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (w0, w1) = (e0 / z, e1 / z);
            expected[2 * i] = w0 * v[0] + w1 * v[2];
            expected[2 * i + 1] = w0 * v[1] + w1 * v[3];
        }

        let mut g = Graph::new();
        let qt = g.constant(&[2, 2], q.to_vec()).unwrap();
        let kt = g.constant(&[2, 2], k.to_vec()).unwrap();
        let vt = g.constant(&[2, 2], v.to_vec()).unwrap();
        let out = scaled_dot_attention(&mut g, qt, kt, vt, &[true, true]).unwrap();
        for (a, e) in g.value(out).values().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn fully_masked_is_an_error() {
        let mut g = Graph::new();
        let q = g.constant(&[2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            scaled_dot_attention(&mut g, q, q, q, &[false, false]),
            Err(Error::EmptyAttention)
        ));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::new();
        let q = g.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let k = g.constant(&[2, 1], vec![1.0, 50.0]).unwrap();
        let v = g.constant(&[2, 1], vec![10.0, 999.0]).unwrap();
        let out = scaled_dot_attention(&mut g, q, k, v, &[true, false]).unwrap();
        assert_eq!(g.value(out).values(), &[10.0, 10.0]);
    }

    #[test]
    fn single_position_with_identity_out_proj_concatenates_value_heads() {
        let d = 4;
        let heads = 2;
        let mut r = rng();
        let mut p = MhaParams::init(d, heads, &mut r).unwrap();
        let mut eye = Tensor::zeros(&[d, d]).unwrap();
        for i in 0..d {
            eye.values_mut()[i * d + i] = 1.0;
        }
        p.out_proj.weight = eye;
        p.out_proj.bias = Tensor::zeros(&[d]).unwrap();
        let x = alloc(&[1, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();

        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let xin = g.leaf(x.clone());
        let out = multi_head_attention(&mut g, xin, &[true], &bound).unwrap();

        let mut expected = Vec::new();
        for i in 0..heads {
            let w = p.value[i].values();
            let dk = d / heads;
            for row in 0..dk {
                let mut s = 0.0;
                for c in 0..d {
                    s += w[row * d + c] * x.values()[c];
                }
                expected.push(s);
            }
        }
        for (a, e) in g.value(out).values().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn head_count_must_divide_dim() {
        let mut r = rng();
        assert!(matches!(
            MhaParams::init(6, 4, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn permuting_rows_permutes_output_rows() {
        let d = 4;
        let l = 3;
        let mut r = rng();
        let p = MhaParams::init(d, 2, &mut r).unwrap();
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let perm = [2usize, 0, 1];
        let mut xp = vec![0.0; l * d];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * d..(dst + 1) * d].copy_from_slice(&x.values()[src * d..(src + 1) * d]);
        }

        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let a = g.leaf(x);
        let b = g.constant(&[l, d], xp).unwrap();
        let mask = vec![true; l];
        let ya = multi_head_attention(&mut g, a, &mask, &bound).unwrap();
        let yb = multi_head_attention(&mut g, b, &mask, &bound).unwrap();
        let (va, vb) = (g.value(ya).values(), g.value(yb).values());
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((vb[dst * d + j] - va[src * d + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_gradient_check() {
        let d = 4;
        let l = 3;
        let mut r = rng();
        let p = MhaParams::init(d, 2, &mut r).unwrap();
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mut params: Vec<Tensor> = Vec::new();
        p.visit("mha", &mut |_, t| params.push(t.clone()));
        params.push(x);
        let err = finite_diff_check(
            |g, ids| {
                let bound = MhaParams {
                    query: vec![ids[0], ids[1]],
                    key: vec![ids[2], ids[3]],
                    value: vec![ids[4], ids[5]],
                    out_proj: AffineParams { weight: ids[6], bias: ids[7] },
                };
                let y = multi_head_attention(g, ids[8], &[true, true, true], &bound)?;
                let y = g.tanh(y);
                g.sum(y, None)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn zero_out_proj_collapses_to_layer_norm() {
        let d = 4;
        let l = 3;
        let mut r = rng();
        let mut p = SeLayerParams::init(d, 2, 0.0, &mut r).unwrap();
        p.mha.out_proj.weight = Tensor::zeros(&[d, d]).unwrap();
        p.mha.out_proj.bias = Tensor::zeros(&[d]).unwrap();
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mask = vec![true; l];

        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let xin = g.leaf(x.clone());
        let out = se_layer(&mut g, xin, &mask, &bound, Mode::Eval, &mut r).unwrap();
        let gain = g.leaf(p.norm.gain.clone());
        let bias = g.leaf(p.norm.bias.clone());
        let xin2 = g.leaf(x);
        let ln = nn::layer_norm(&mut g, xin2, &NormParams { gain, bias, eps: p.norm.eps }).unwrap();
        assert_eq!(g.value(out).values(), g.value(ln).values());
    }

    #[test]
    fn se_layer_eval_deterministic_and_stackable() {
        let d = 4;
        let l = 5;
        let mut r = rng();
        let layers: Vec<_> = (0..6)
            .map(|_| SeLayerParams::init(d, 4, 0.2, &mut r).unwrap())
            .collect();
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mask = vec![true; l];
        let mut run = || {
            let mut g = Graph::new();
            let mut h = g.leaf(x.clone());
            for p in &layers {
                let bound = p.map(&mut |t| g.leaf(t.clone()));
                h = se_layer(&mut g, h, &mask, &bound, Mode::Eval, &mut r).unwrap();
            }
            assert_eq!(g.value(h).shape(), &[l, d]);
            g.value(h).values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padded_rows_are_zero_and_do_not_leak() {
        let d = 4;
        let l = 4;
        let valid = 2;
        let mut r = rng();
        let p = SeLayerParams::init(d, 2, 0.0, &mut r).unwrap();
        let base = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mut noisy = base.clone();
        for v in noisy.values_mut()[valid * d..].iter_mut() {
            *v = -77.0;
        }
        let mask: Vec<bool> = (0..l).map(|i| i < valid).collect();
        let run = |x: Tensor, r: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let bound = p.map(&mut |t| g.leaf(t.clone()));
            let xin = g.leaf(x);
            let out = se_layer(&mut g, xin, &mask, &bound, Mode::Eval, r).unwrap();
            g.value(out).values().to_vec()
        };
        let a = run(base, &mut r);
        let b = run(noisy, &mut r);
        for (x, y) in a[..valid * d].iter().zip(&b[..valid * d]) {
            assert_eq!(x, y);
        }
        assert!(a[valid * d..].iter().all(|&x| x == 0.0));
        assert!(b[valid * d..].iter().all(|&x| x == 0.0));
    }
}
