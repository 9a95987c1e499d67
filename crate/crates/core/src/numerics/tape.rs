//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, which is already a topological order. [`Tape::backward`] walks it
//! once in reverse and accumulates gradients additively, so a node feeding
//! several consumers receives the sum of their contributions.

use super::kernels::{self, gelu, gelu_grad};
use super::linalg;
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{check_axes, inverse_axes, numel, permute_data, strides};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, F),
    Exp(Var),
    Abs(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    PairwiseSqDist(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    SegmentSum(Var, Vec<Vec<usize>>),
    Sum(Var),
    GaussianNll {
        sigma: Var,
        resid: Var,
        alpha: Vec<F>,
        inv: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<'p, F: Real> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Strides of `b` expanded to the rank of `a`, zero on broadcast axes.
fn broadcast_strides(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() {
        return Err(Error::shape(op, format!("{b:?} does not broadcast to {a:?}")));
    }
    let offset = a.len() - b.len();
    let bs = strides(b);
    let mut out = vec![0; a.len()];
    for (i, &bd) in b.iter().enumerate() {
        let ad = a[offset + i];
        if bd == ad {
            out[offset + i] = bs[i];
        } else if bd != 1 {
            return Err(Error::shape(op, format!("{b:?} does not broadcast to {a:?}")));
        }
    }
    Ok(out)
}

/// Visits every flat index of `shape` together with the matching offset into
/// a broadcast operand with strides `bstr`.
fn for_each_broadcast(shape: &[usize], bstr: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += bstr[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= bstr[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient can be read back with
    /// [`Tape::backward_with_leaves`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The current value of a stored parameter; repeated calls share a node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id.0), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + b` with `b` broadcast against `a` (right-aligned, extents equal
    /// or 1).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let bstr = broadcast_strides("add_broadcast", self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let mut data = x.data().to_vec();
        let yd = y.data();
        for_each_broadcast(x.shape(), &bstr, |i, j| data[i] += yd[j]);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    /// `a` times the single value held by `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("{:?}", self.shape(s))));
        }
        let k = self.value(s).item();
        let t = self.value(a).map(|v| v * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::c(c);
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.exp());
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.abs());
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`: a matrix product over the last axis
    /// of `a`, leading axes treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); m * n];
        kernels::count_dense(m, k, n);
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![F::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, ai, bi, oi);
            } else {
                kernels::gemm_nn(m, k, n, ai, bi, oi);
            }
        }
        kernels::count_batched(batch * m, k, n);
        let t = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let w = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let mut out = vec![F::zero(); x.len()];
        if w > 0 {
            kernels::softmax_rows(x.data(), w, &mut out);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with learnable `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let w = *xs.last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if w == 0 || self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!("{xs:?} with gain {:?}", self.shape(gain)),
            ));
        }
        let xv = self.value(x);
        let n = xv.len();
        let mut out = vec![F::zero(); n];
        let mut xhat = vec![F::zero(); n];
        let mut inv_std = vec![F::zero(); n / w];
        kernels::layer_norm_rows(
            xv.data(),
            w,
            self.value(gain).data(),
            self.value(bias).data(),
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `[B, n, k] -> [B, n, n]` squared Euclidean distances between rows,
    /// computed from explicit differences (exact zeros on the diagonal).
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("pairwise_sq_dist", format!("{s:?}")));
        }
        let (batch, n, k) = (s[0], s[1], s[2]);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); batch * n * n];
        for b in 0..batch {
            let xb = &x[b * n * k..(b + 1) * n * k];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = F::zero();
                    for p in 0..k {
                        let d = xb[i * k + p] - xb[j * k + p];
                        acc += d * d;
                    }
                    out[(b * n + i) * n + j] = acc;
                }
            }
        }
        let t = Tensor::new(vec![batch, n, n], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::PairwiseSqDist(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        check_axes("permute", self.shape(a).len(), axes)?;
        let t = self.value(a).permute(axes)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Gathers rows of the leading axis; indices may repeat (broadcast).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a).select_rows(indices)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SelectRows(a, indices.to_vec()), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs tail {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Output row `g` is the sum of the input rows listed in `groups[g]`,
    /// added in the listed order.
    pub fn segment_sum(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.first().ok_or_else(|| Error::shape("segment_sum", "rank 0"))?;
        let row = numel(&s) / n.max(1);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); groups.len() * row];
        for (g, members) in groups.iter().enumerate() {
            let o = &mut out[g * row..(g + 1) * row];
            for &i in members {
                if i >= n {
                    return Err(Error::Structure(format!("row {i} out of range for {n} rows")));
                }
                for (ov, &xv) in o.iter_mut().zip(&x[i * row..(i + 1) * row]) {
                    *ov += xv;
                }
            }
        }
        let mut shape = s.clone();
        shape[0] = groups.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SegmentSum(a, groups.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over slices `b` of the multivariate-normal negative log density
    /// `½[S log 2π + log|Σ_b| + r_bᵀ Σ_b⁻¹ r_b]`, with `sigma: [B, S, S]` and
    /// `resid: [B, S]`. Evaluated through a Cholesky factorization that
    /// reads the lower triangle; fails with [`Error::Cholesky`] naming the
    /// first slice that is not positive definite.
    pub fn gaussian_nll(&mut self, sigma: Var, resid: Var) -> Result<Var> {
        let ss = self.shape(sigma).to_vec();
        let rs = self.shape(resid).to_vec();
        if ss.len() != 3 || ss[1] != ss[2] || rs != [ss[0], ss[1]] {
            return Err(Error::shape("gaussian_nll", format!("{ss:?} with {rs:?}")));
        }
        let (batch, n) = (ss[0], ss[1]);
        let sd = self.value(sigma).data();
        let rd = self.value(resid).data();
        let mut alpha = vec![F::zero(); batch * n];
        let mut inv = vec![F::zero(); batch * n * n];
        let log2pi = F::c((2.0 * std::f64::consts::PI).ln());
        let mut total = F::zero();
        for b in 0..batch {
            let sb = &sd[b * n * n..(b + 1) * n * n];
            let l = linalg::cholesky(sb, n).ok_or(Error::Cholesky { slice: b })?;
            let ab = &mut alpha[b * n..(b + 1) * n];
            ab.copy_from_slice(&rd[b * n..(b + 1) * n]);
            linalg::solve_lower(&l, n, ab);
            let quad: F = ab.iter().map(|&v| v * v).sum();
            linalg::solve_lower_transpose(&l, n, ab);
            let logdet = linalg::log_det_from_cholesky(&l, n);
            total += F::c(0.5) * (F::c(n as f64) * log2pi + logdet + quad);
            inv[b * n * n..(b + 1) * n * n].copy_from_slice(&linalg::inverse_from_cholesky(&l, n));
        }
        let rg = self.rg(sigma) || self.rg(resid);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GaussianNll {
                sigma,
                resid,
                alpha,
                inv,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        Ok(self.backward_with_leaves(loss, &[])?.0)
    }

    /// Like [`Tape::backward`], also returning gradients for `leaves`
    /// (zeros where the loss does not depend on them).
    pub fn backward_with_leaves(
        &self,
        loss: Var,
        leaves: &[Var],
    ) -> Result<(Gradients<F>, Vec<Tensor<F>>)> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::empty(self.store.len());

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Param(p) = node.op {
                out.add_to(p, &Tensor::new(node.value.shape().to_vec(), g.clone())?);
            }
            let keep = leaves.iter().any(|l| l.0 == id);
            self.propagate(id, &g, &mut grads);
            if keep {
                grads[id] = Some(g);
            }
        }

        let leaf_grads = leaves
            .iter()
            .map(|l| {
                let shape = self.shape(*l).to_vec();
                match grads.get(l.0).cloned().flatten() {
                    Some(g) => Tensor::new(shape, g),
                    None => Ok(Tensor::zeros(&shape)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, leaf_grads))
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, &v) in gb.iter_mut().zip(g) {
                        *x -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let shape = node.value.shape();
                let bstr = broadcast_strides("add_broadcast", shape, self.shape(*b))
                    .expect("validated in forward");
                acc(*b, &mut |gb| for_each_broadcast(shape, &bstr, |i, j| gb[j] += g[i]));
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * k;
                    }
                });
                acc(*s, &mut |gs| {
                    let mut t = F::zero();
                    for i in 0..g.len() {
                        t += g[i] * av[i];
                    }
                    gs[0] += t;
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * *c;
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Abs(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let s = if av[i] > F::zero() {
                            F::one()
                        } else if av[i] < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        ga[i] += g[i] * s;
                    }
                })
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |ga| kernels::gemm_nt(m, n, k, g, bv, ga));
                acc(*b, &mut |gb| kernels::gemm_tn(k, m, n, av, g, gb));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // d(a bᵀ)/da = g b
                            kernels::gemm_nn(m, n, k, gi, bi, gai);
                        } else {
                            kernels::gemm_nt(m, n, k, gi, bi, gai);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(a bᵀ)/db = gᵀ a
                            kernels::gemm_tn(n, m, k, gi, ai, gbi);
                        } else {
                            kernels::gemm_tn(k, m, n, ai, gi, gbi);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let w = *node.value.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for r in 0..ga.len() / w.max(1) {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..w {
                            ga[r * w + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let w = *node.value.shape().last().unwrap();
                let rows = xhat.len() / w;
                let gv = self.value(*gain).data();
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..w {
                            gg[j] += g[r * w + j] * xhat[r * w + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..w {
                            gb[j] += g[r * w + j];
                        }
                    }
                });
                let wf = F::c(w as f64);
                acc(*x, &mut |gx| {
                    let mut dh = vec![F::zero(); w];
                    for r in 0..rows {
                        let base = r * w;
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..w {
                            dh[j] = g[base + j] * gv[j];
                            s1 += dh[j];
                            s2 += dh[j] * xhat[base + j];
                        }
                        let k = inv_std[r] / wf;
                        for j in 0..w {
                            gx[base + j] += k * (wf * dh[j] - s1 - xhat[base + j] * s2);
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a) => {
                let s = self.shape(*a);
                let (batch, n, k) = (s[0], s[1], s[2]);
                let xv = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for b in 0..batch {
                        let xb = &xv[b * n * k..(b + 1) * n * k];
                        let gbm = &g[b * n * n..(b + 1) * n * n];
                        for i in 0..n {
                            for j in 0..n {
                                let w = F::c(2.0) * (gbm[i * n + j] + gbm[j * n + i]);
                                if w == F::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[(b * n + i) * k + p] += w * (xb[i * k + p] - xb[j * k + p]);
                                }
                            }
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Permute(a, axes) => {
                let back = permute_data(g, node.value.shape(), &inverse_axes(axes));
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::SelectRows(a, idx) => {
                let row = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                acc(*a, &mut |ga| {
                    for (o, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * row..(i + 1) * row], &g[o * row..(o + 1) * row]);
                    }
                })
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SegmentSum(a, groups) => {
                let row = if groups.is_empty() { 0 } else { g.len() / groups.len() };
                acc(*a, &mut |ga| {
                    for (s, members) in groups.iter().enumerate() {
                        for &i in members {
                            add_into(&mut ga[i * row..(i + 1) * row], &g[s * row..(s + 1) * row]);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::GaussianNll {
                sigma,
                resid,
                alpha,
                inv,
            } => {
                let n = self.shape(*resid)[1];
                let batch = self.shape(*resid)[0];
                let half = F::c(0.5) * g[0];
                acc(*sigma, &mut |gs| {
                    for b in 0..batch {
                        let ab = &alpha[b * n..(b + 1) * n];
                        for i in 0..n {
                            for j in 0..n {
                                let o = (b * n + i) * n + j;
                                gs[o] += half * (inv[o] - ab[i] * ab[j]);
                            }
                        }
                    }
                });
                acc(*resid, &mut |gr| {
                    for (x, &a) in gr.iter_mut().zip(alpha) {
                        *x += g[0] * a;
                    }
                });
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
