//! Temporal encoder: a single-layer bidirectional GRU over the utterance
//! sequence, projection back to the model dimension, dropout, residual sum
//! with the block input, and layer normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, AffineParams, Mode, NormParams};
use crate::tensor::{alloc, Graph, Init, Tensor, TensorId};

/// One GRU direction: per-gate input weights `[h, d]`, recurrent weights
/// `[h, h]` and biases `[h]` for the update gate `z`, reset gate `r`, and
/// candidate state.
#[derive(Debug, Clone)]
pub struct GruDirection<T> {
    pub wz: T,
    pub uz: T,
    pub bz: T,
    pub wr: T,
    pub ur: T,
    pub br: T,
    pub wh: T,
    pub uh: T,
    pub bh: T,
}

/// Both directions of the bidirectional GRU. Hidden size equals the model
/// dimension, so the concatenated output has extent `2d`.
#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub fwd: GruDirection<T>,
    pub bwd: GruDirection<T>,
}

/// One temporal-encoder layer: BiGRU, `2d -> d` projection, dropout rate,
/// and the closing layer norm.
#[derive(Debug, Clone)]
pub struct TeLayerParams<T> {
    pub gru: GruParams<T>,
    pub proj: AffineParams<T>,
    pub norm: NormParams<T>,
    pub dropout_rate: f64,
}

impl GruDirection<Tensor> {
    fn init<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        let w = |rng: &mut R| alloc(&[dim, dim], Init::ScaledUniform { fan_in: dim }, rng);
        Ok(GruDirection {
            wz: w(rng)?,
            uz: w(rng)?,
            bz: Tensor::zeros(&[dim])?,
            wr: w(rng)?,
            ur: w(rng)?,
            br: Tensor::zeros(&[dim])?,
            wh: w(rng)?,
            uh: w(rng)?,
            bh: Tensor::zeros(&[dim])?,
        })
    }
}

impl<T> GruDirection<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (name, t) in [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("bz", &self.bz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("br", &self.br),
            ("wh", &self.wh),
            ("uh", &self.uh),
            ("bh", &self.bh),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (name, t) in [
            ("wz", &mut self.wz),
            ("uz", &mut self.uz),
            ("bz", &mut self.bz),
            ("wr", &mut self.wr),
            ("ur", &mut self.ur),
            ("br", &mut self.br),
            ("wh", &mut self.wh),
            ("uh", &mut self.uh),
            ("bh", &mut self.bh),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GruDirection<U> {
        GruDirection {
            wz: f(&self.wz),
            uz: f(&self.uz),
            bz: f(&self.bz),
            wr: f(&self.wr),
            ur: f(&self.ur),
            br: f(&self.br),
            wh: f(&self.wh),
            uh: f(&self.uh),
            bh: f(&self.bh),
        }
    }
}

impl GruParams<Tensor> {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        Ok(GruParams {
            fwd: GruDirection::init(dim, rng)?,
            bwd: GruDirection::init(dim, rng)?,
        })
    }
}

impl<T> GruParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.fwd.visit_mut(&format!("{prefix}.fwd"), f);
        self.bwd.visit_mut(&format!("{prefix}.bwd"), f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GruParams<U> {
        GruParams {
            fwd: self.fwd.map(f),
            bwd: self.bwd.map(f),
        }
    }
}

impl TeLayerParams<Tensor> {
    pub fn init<R: Rng>(dim: usize, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        Ok(TeLayerParams {
            gru: GruParams::init(dim, rng)?,
            proj: AffineParams::init(dim, 2 * dim, rng)?,
            norm: NormParams::init(dim)?,
            dropout_rate,
        })
    }
}

impl<T> TeLayerParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.gru.visit(&format!("{prefix}.gru"), f);
        self.proj.visit(&format!("{prefix}.proj"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        self.gru.visit_mut(&format!("{prefix}.gru"), f);
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TeLayerParams<U> {
        TeLayerParams {
            gru: self.gru.map(f),
            proj: self.proj.map(f),
            norm: self.norm.map(f),
            dropout_rate: self.dropout_rate,
        }
    }
}

/// Weight matrices of one direction pre-transposed once per sequence so the
/// per-step cells are plain `[1, d] x [d, h]` products.
struct DirectionBound {
    wz_t: TensorId,
    uz_t: TensorId,
    bz: TensorId,
    wr_t: TensorId,
    ur_t: TensorId,
    br: TensorId,
    wh_t: TensorId,
    uh_t: TensorId,
    bh: TensorId,
}

impl DirectionBound {
    fn new(g: &mut Graph, p: &GruDirection<TensorId>) -> Result<Self> {
        Ok(DirectionBound {
            wz_t: g.transpose(p.wz)?,
            uz_t: g.transpose(p.uz)?,
            bz: p.bz,
            wr_t: g.transpose(p.wr)?,
            ur_t: g.transpose(p.ur)?,
            br: p.br,
            wh_t: g.transpose(p.wh)?,
            uh_t: g.transpose(p.uh)?,
            bh: p.bh,
        })
    }
}

/// z = sigmoid(Wz x + Uz h + bz); r = sigmoid(Wr x + Ur h + br);
/// cand = tanh(Wh x + Uh (r*h) + bh); h' = (1 - z)*h + z*cand.
fn cell_step(g: &mut Graph, x: TensorId, h_prev: TensorId, d: &DirectionBound) -> Result<TensorId> {
    let gate = |g: &mut Graph, w_t, u_t, b, h_in| -> Result<TensorId> {
        let xi = g.matmul(x, w_t)?;
        let hi = g.matmul(h_in, u_t)?;
        let s = g.add(xi, hi)?;
        g.add(s, b)
    };
    let z = gate(g, d.wz_t, d.uz_t, d.bz, h_prev)?;
    let z = g.sigmoid(z);
    let r = gate(g, d.wr_t, d.ur_t, d.br, h_prev)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h_prev)?;
    let cand = gate(g, d.wh_t, d.uh_t, d.bh, rh)?;
    let cand = g.tanh(cand);
    let one_minus_z = g.affine(z, -1.0, 1.0);
    let keep = g.mul(one_minus_z, h_prev)?;
    let update = g.mul(z, cand)?;
    g.add(keep, update)
}

/// One GRU cell. `x` and `h_prev` may be `[d]`/`[h]` vectors or `[1, *]`
/// rows; the result is a `[1, h]` row.
pub fn gru_cell(
    g: &mut Graph,
    x: TensorId,
    h_prev: TensorId,
    p: &GruDirection<TensorId>,
) -> Result<TensorId> {
    let x = as_row(g, x)?;
    let h_prev = as_row(g, h_prev)?;
    let bound = DirectionBound::new(g, p)?;
    cell_step(g, x, h_prev, &bound)
}

fn as_row(g: &mut Graph, id: TensorId) -> Result<TensorId> {
    let shape = g.value(id).shape().to_vec();
    match shape.len() {
        1 => g.reshape(id, &[1, shape[0]]),
        2 if shape[0] == 1 => Ok(id),
        _ => Err(Error::Rank(format!("expected a vector or row, got {shape:?}"))),
    }
}

/// Bidirectional GRU over the first `length` rows of `seq: [L, d]`, zero
/// initial states, outputs concatenated per position to `[L, 2d]`. Rows at
/// and beyond `length` are exactly zero.
pub fn bigru(
    g: &mut Graph,
    seq: TensorId,
    length: usize,
    p: &GruParams<TensorId>,
) -> Result<TensorId> {
    let shape = g.value(seq).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Rank(format!("bigru expects [L, d], got {shape:?}")));
    }
    let (l, d) = (shape[0], shape[1]);
    if length == 0 {
        return Err(Error::Empty("bigru over an empty sequence".into()));
    }
    if length > l {
        return Err(Error::Range(format!("length {length} exceeds rows {l}")));
    }

    let fwd = DirectionBound::new(g, &p.fwd)?;
    let bwd = DirectionBound::new(g, &p.bwd)?;
    let h0 = g.constant(&[1, d], vec![0.0; d])?;

    let mut h = h0;
    let mut fwd_rows = Vec::with_capacity(length);
    for t in 0..length {
        let x = g.slice(seq, t..t + 1, 0)?;
        h = cell_step(g, x, h, &fwd)?;
        fwd_rows.push(h);
    }

    let mut h = h0;
    let mut bwd_rows = vec![h0; length];
    for t in (0..length).rev() {
        let x = g.slice(seq, t..t + 1, 0)?;
        h = cell_step(g, x, h, &bwd)?;
        bwd_rows[t] = h;
    }

    let fwd_block = g.stack_rows(&fwd_rows)?;
    let bwd_block = g.stack_rows(&bwd_rows)?;
    let valid = g.concat(fwd_block, bwd_block, 1)?;
    if length < l {
        let pad = g.constant(&[l - length, 2 * d], vec![0.0; (l - length) * 2 * d])?;
        g.concat(valid, pad, 0)
    } else {
        Ok(valid)
    }
}

/// One temporal-encoder layer over the first `length` rows of `x: [L, d]`:
/// layer-norm of the input plus the dropped-out projection of the BiGRU
/// output. Padded rows stay zero.
pub fn te_layer<R: Rng>(
    g: &mut Graph,
    x: TensorId,
    length: usize,
    p: &TeLayerParams<TensorId>,
    mode: Mode,
    rng: &mut R,
) -> Result<TensorId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Rank(format!("te_layer expects [L, d], got {shape:?}")));
    }
    let (l, d) = (shape[0], shape[1]);
    if length == 0 {
        return Err(Error::Empty("te_layer over an empty sequence".into()));
    }
    let valid = if length < l {
        g.slice(x, 0..length, 0)?
    } else {
        x
    };
    let gru_out = bigru(g, valid, length, &p.gru)?;
    let projected = nn::linear(g, gru_out, &p.proj)?;
    let dropped = nn::dropout(g, projected, p.dropout_rate, mode, rng)?;
    let residual = g.add(valid, dropped)?;
    let normed = nn::layer_norm(g, residual, &p.norm)?;
    if length < l {
        let pad = g.constant(&[l - length, d], vec![0.0; (l - length) * d])?;
        g.concat(normed, pad, 0)
    } else {
        Ok(normed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn flat_gru(p: &GruParams<Tensor>) -> Vec<Tensor> {
        let mut out = Vec::new();
        p.visit("gru", &mut |_, t| out.push(t.clone()));
        out
    }

    fn rebind_gru(ids: &[TensorId]) -> GruParams<TensorId> {
        let mut it = ids.iter().copied();
        let mut dir = || GruDirection {
            wz: it.next().unwrap(),
            uz: it.next().unwrap(),
            bz: it.next().unwrap(),
            wr: it.next().unwrap(),
            ur: it.next().unwrap(),
            br: it.next().unwrap(),
            wh: it.next().unwrap(),
            uh: it.next().unwrap(),
            bh: it.next().unwrap(),
        };
        GruParams { fwd: dir(), bwd: dir() }
    }

    #[test]
    fn zero_params_halve_previous_state() {
        let d = 3;
        let mut g = Graph::new();
        let zeros2 = Tensor::zeros(&[d, d]).unwrap();
        let zeros1 = Tensor::zeros(&[d]).unwrap();
        let dir = GruDirection {
            wz: g.leaf(zeros2.clone()),
            uz: g.leaf(zeros2.clone()),
            bz: g.leaf(zeros1.clone()),
            wr: g.leaf(zeros2.clone()),
            ur: g.leaf(zeros2.clone()),
            br: g.leaf(zeros1.clone()),
            wh: g.leaf(zeros2.clone()),
            uh: g.leaf(zeros2.clone()),
            bh: g.leaf(zeros1.clone()),
        };
        let x = g.constant(&[d], vec![0.4, -0.2, 1.0]).unwrap();
        let h = g.constant(&[d], vec![1.0, 2.0, -4.0]).unwrap();
        let out = gru_cell(&mut g, x, h, &dir).unwrap();
        assert_eq!(g.value(out).values(), &[0.5, 1.0, -2.0]);

        let h0 = g.constant(&[d], vec![0.0; d]).unwrap();
        let fixed = gru_cell(&mut g, h0, h0, &dir).unwrap();
        assert_eq!(g.value(fixed).values(), &[0.0; 3]);
    }

    #[test]
    fn chained_cells_gradient_check() {
        let d = 3;
        let mut r = rng();
        let p = GruParams::init(d, &mut r).unwrap();
        let xs = alloc(&[3, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mut params = flat_gru(&p);
        params.truncate(9); // forward direction only
        params.push(xs);
        let err = finite_diff_check(
            |g, ids| {
                let mut it = ids[..9].iter().copied();
                let dir = GruDirection {
                    wz: it.next().unwrap(),
                    uz: it.next().unwrap(),
                    bz: it.next().unwrap(),
                    wr: it.next().unwrap(),
                    ur: it.next().unwrap(),
                    br: it.next().unwrap(),
                    wh: it.next().unwrap(),
                    uh: it.next().unwrap(),
                    bh: it.next().unwrap(),
                };
                let mut h = g.constant(&[1, 3], vec![0.0; 3])?;
                for t in 0..3 {
                    let x = g.slice(ids[9], t..t + 1, 0)?;
                    h = gru_cell(g, x, h, &dir)?;
                }
                g.sum(h, None)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn bigru_single_step_concatenates_both_cells() {
        let d = 2;
        let mut r = rng();
        let p = GruParams::init(d, &mut r).unwrap();
        let x = alloc(&[1, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();

        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let seq = g.leaf(x.clone());
        let out = bigru(&mut g, seq, 1, &bound).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 2 * d]);

        let h0 = g.constant(&[d], vec![0.0; d]).unwrap();
        let xin = g.leaf(x);
        let fwd = gru_cell(&mut g, xin, h0, &bound.fwd).unwrap();
        let bwd = gru_cell(&mut g, xin, h0, &bound.bwd).unwrap();
        let expect: Vec<f64> = g
            .value(fwd)
            .values()
            .iter()
            .chain(g.value(bwd).values())
            .copied()
            .collect();
        assert_eq!(g.value(out).values(), &expect[..]);
    }

    #[test]
    fn bigru_pads_with_exact_zeros() {
        let d = 2;
        let mut r = rng();
        let p = GruParams::init(d, &mut r).unwrap();
        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let seq = g
            .leaf(alloc(&[5, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap());
        let out = bigru(&mut g, seq, 3, &bound).unwrap();
        let v = g.value(out).values();
        assert!(v[3 * 2 * d..].iter().all(|&x| x == 0.0));
        assert!(v[..3 * 2 * d].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn bigru_rejects_empty_sequence() {
        let mut r = rng();
        let p = GruParams::init(2, &mut r).unwrap();
        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let seq = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            bigru(&mut g, seq, 0, &bound),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn reversing_sequence_swaps_direction_halves() {
        // With both directions sharing parameters, running the reversed
        // sequence must mirror the halves at mirrored positions.
        let d = 3;
        let l = 4;
        let mut r = rng();
        let shared = GruDirection::init(d, &mut r).unwrap();
        let p = GruParams {
            fwd: shared.clone(),
            bwd: shared,
        };
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mut rev_values = vec![0.0; l * d];
        for t in 0..l {
            rev_values[t * d..(t + 1) * d].copy_from_slice(&x.values()[(l - 1 - t) * d..(l - t) * d]);
        }

        let mut g = Graph::new();
        let bound = p.map(&mut |t| g.leaf(t.clone()));
        let seq = g.leaf(x);
        let seq_rev = g.constant(&[l, d], rev_values).unwrap();
        let out = bigru(&mut g, seq, l, &bound).unwrap();
        let out_rev = bigru(&mut g, seq_rev, l, &bound).unwrap();
        let (v, vr) = (g.value(out).values(), g.value(out_rev).values());
        for t in 0..l {
            let m = l - 1 - t;
            for j in 0..d {
                let fwd_rev = vr[t * 2 * d + j];
                let bwd_orig = v[m * 2 * d + d + j];
                assert!((fwd_rev - bwd_orig).abs() < 1e-12);
                let bwd_rev = vr[t * 2 * d + d + j];
                let fwd_orig = v[m * 2 * d + j];
                assert!((bwd_rev - fwd_orig).abs() < 1e-12);
            }
        }
    }

    fn te_params_bound(g: &mut Graph, p: &TeLayerParams<Tensor>) -> TeLayerParams<TensorId> {
        p.map(&mut |t| g.leaf(t.clone()))
    }

    #[test]
    fn zero_projection_collapses_to_layer_norm() {
        let d = 3;
        let l = 4;
        let mut r = rng();
        let mut p = TeLayerParams::init(d, 0.0, &mut r).unwrap();
        p.proj.weight = Tensor::zeros(&[d, 2 * d]).unwrap();
        p.proj.bias = Tensor::zeros(&[d]).unwrap();
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();

        let mut g = Graph::new();
        let bound = te_params_bound(&mut g, &p);
        let xin = g.leaf(x.clone());
        let out = te_layer(&mut g, xin, l, &bound, Mode::Eval, &mut r).unwrap();
        let gain = g.leaf(p.norm.gain.clone());
        let bias = g.leaf(p.norm.bias.clone());
        let xin2 = g.leaf(x);
        let ln = nn::layer_norm(&mut g, xin2, &NormParams { gain, bias, eps: p.norm.eps }).unwrap();
        assert_eq!(g.value(out).values(), g.value(ln).values());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let d = 3;
        let mut r = rng();
        let p = TeLayerParams::init(d, 0.5, &mut r).unwrap();
        let x = alloc(&[3, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let run = |rr: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let bound = te_params_bound(&mut g, &p);
            let xin = g.leaf(x.clone());
            let out = te_layer(&mut g, xin, 3, &bound, Mode::Eval, rr).unwrap();
            g.value(out).values().to_vec()
        };
        let a = run(&mut r);
        let b = run(&mut r);
        assert_eq!(a, b);
    }

    #[test]
    fn output_shape_preserved_and_padding_ignored() {
        let d = 2;
        let l = 5;
        let length = 3;
        let mut r = rng();
        let p = TeLayerParams::init(d, 0.0, &mut r).unwrap();
        let base = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();
        let mut noisy = base.clone();
        for v in noisy.values_mut()[length * d..].iter_mut() {
            *v = 123.0;
        }
        let run = |x: Tensor, r: &mut ChaCha8Rng| {
            let mut g = Graph::new();
            let bound = p.map(&mut |t| g.leaf(t.clone()));
            let xin = g.leaf(x);
            let out = te_layer(&mut g, xin, length, &bound, Mode::Eval, r).unwrap();
            assert_eq!(g.value(out).shape(), &[l, d]);
            g.value(out).values().to_vec()
        };
        let a = run(base, &mut r);
        let b = run(noisy, &mut r);
        assert_eq!(a, b);
        assert!(a[length * d..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn depth_two_stack_gradient_check() {
        let d = 3;
        let l = 3;
        let mut r = rng();
        let p0 = TeLayerParams::init(d, 0.0, &mut r).unwrap();
        let p1 = TeLayerParams::init(d, 0.0, &mut r).unwrap();
        let x = alloc(&[l, d], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut r).unwrap();

        let mut params: Vec<Tensor> = Vec::new();
        p0.visit("l0", &mut |_, t| params.push(t.clone()));
        p1.visit("l1", &mut |_, t| params.push(t.clone()));
        let n0 = {
            let mut c = 0;
            p0.visit("l0", &mut |_, _| c += 1);
            c
        };
        params.push(x);

        let rebind = |ids: &[TensorId]| -> TeLayerParams<TensorId> {
            let gru = rebind_gru(&ids[..18]);
            TeLayerParams {
                gru,
                proj: AffineParams { weight: ids[18], bias: ids[19] },
                norm: NormParams { gain: ids[20], bias: ids[21], eps: DEFAULT_EPS },
            dropout_rate: 0.0,
            }
        };

        let err = finite_diff_check(
            |g, ids| {
                let mut dummy = ChaCha8Rng::seed_from_u64(0);
                let l0 = rebind(&ids[..n0]);
                let l1 = rebind(&ids[n0..2 * n0]);
                let mut h = ids[2 * n0];
                h = te_layer(g, h, l, &l0, Mode::Eval, &mut dummy)?;
                h = te_layer(g, h, l, &l1, Mode::Eval, &mut dummy)?;
                let s = g.tanh(h);
                g.sum(s, None)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    const DEFAULT_EPS: f64 = crate::nn::DEFAULT_LN_EPS;
}
