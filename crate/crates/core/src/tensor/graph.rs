use std::collections::HashMap;

use super::kernels::{self, ConvDims};
use super::{ParamId, ParamStore, Tensor};
use crate::dtw;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance over the batch.
    pub var: Vec<S>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    /// `b`'s shape is a suffix of `a`'s; it broadcasts over the leading axes.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        kind: NormKind,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    RowNorm(Var),
    Dtw {
        a: Var,
        b: Var,
        paths: Vec<Vec<(usize, usize)>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    /// Normalized with the statistics of the batch, per channel (last axis).
    BatchTrain,
    /// Normalized with fixed statistics; a per-channel affine map.
    BatchEval,
    /// Normalized over the last axis of each row.
    Layer,
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Append-only computation graph. Inputs always precede outputs, so the
/// append order is a topological order.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    bound: HashMap<ParamId, Var>,
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored tensor into the graph once; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradients of every bound trainable parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = &self.grads[v.0] {
                let p = store.get_mut(id);
                if p.trainable {
                    for (dst, &src) in p.grad.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(op, value, rg)
    }

    // ---- elementwise -------------------------------------------------

    fn check_suffix(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, sub: bool) -> Result<Var> {
        self.check_suffix(a, b, if sub { "sub" } else { "add" })?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                if sub {
                    *x -= y
                } else {
                    *x += y
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let op = if sub { Op::Sub(a, b) } else { Op::Add(a, b) };
        Ok(self.push(op, value, rg))
    }

    /// `a + b`, with `b` broadcast over `a`'s leading axes when its shape is a suffix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, true)
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| S::one() / (S::one() + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[.., m, k] × [k, n] → [.., m, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.len() < 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} × {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Batched product `[B, m, k] × [B, k, n]`, or `× [B, n, k]ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm: {sa:?} × {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!("bmm: {sa:?} × {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![S::zero(); batch * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for i in 0..batch {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(ai, bi, oi, m, k, n);
            } else {
                kernels::gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Bmm { a, b, trans_b }, value, rg))
    }

    /// Valid cross-correlation of `x: [B, L, c_in]` with `w: [k, c_in, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(Error::shape(format!("conv1d: {sx:?} * {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::BadConfig("conv1d stride must be ≥ 1".into()));
        }
        if sw[0] > sx[1] {
            return Err(Error::shape(format!(
                "conv1d: kernel {} longer than sequence {}",
                sw[0], sx[1]
            )));
        }
        let dims = ConvDims {
            batch: sx[0],
            len: sx[1],
            c_in: sx[2],
            kernel: sw[0],
            c_out: sw[2],
            stride,
        };
        let lo = dims.out_len();
        let mut out = vec![S::zero(); dims.batch * lo * dims.c_out];
        kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &mut out, dims);
        let value = Tensor::new(vec![dims.batch, lo, dims.c_out], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv1d { x, w, dims }, value, rg))
    }

    // ---- normalization -----------------------------------------------

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "norm affine {:?}/{:?} for {} channels",
                self.shape(gamma),
                self.shape(beta),
                c
            )));
        }
        Ok(c)
    }

    /// Training-mode batch norm over every axis but the last (channel) axis.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let c = self.check_affine(x, gamma, beta)?;
        let xd = self.value(x).data();
        let count = xd.len() / c;
        let inv_n = S::one() / S::from_usize(count).unwrap();
        let mut mean = vec![S::zero(); c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![S::zero(); c];
        for row in xd.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_n);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, &mean, &inv_std, NormKind::BatchTrain);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let c = self.check_affine(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics width"));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        Ok(self.affine_normalize(x, gamma, beta, mean, &inv_std, NormKind::BatchEval))
    }

    fn affine_normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], inv_std: &[S], kind: NormKind) -> Var {
        let c = mean.len();
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                kind,
            },
            value,
            rg,
        )
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let c = self.check_affine(x, gamma, beta)?;
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_c = S::one() / S::from_usize(c).unwrap();
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
            value,
            rg,
        ))
    }

    // ---- softmax -------------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = vec![S::zero(); xv.len()];
        kernels::softmax_rows(xv.data(), &mut out, n);
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Softmax(x), value, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = vec![S::zero(); xv.len()];
        kernels::log_softmax_rows(xv.data(), &mut out, n);
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), value, rg)
    }

    // ---- shape ops -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape(format!("concat: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (pre, _, post) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for &v in inputs {
                let s = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[p * s * post..(p + 1) * s * post]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// Sums out `axis`. A fully reduced result has shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum axis {axis} for {shape:?}")));
        }
        let (pre, ax, post) = split_at_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); pre * post];
        for p in 0..pre {
            let o = &mut out[p * post..(p + 1) * post];
            for a in 0..ax {
                let base = (p * ax + a) * post;
                for (ov, &xv) in o.iter_mut().zip(&xd[base..base + post]) {
                    *ov += xv;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SumAxis { x, axis }, value, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, S::one() / S::from_usize(n).unwrap()))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Tensor::scalar(total), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, S::one() / S::from_usize(n).unwrap())
    }

    /// Selects rows (indices into axis 0), repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if idx.is_empty() {
            return Err(Error::shape("gather of no rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} of {rows}")));
        }
        let w = self.value(x).len() / rows;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&xd[i * w..(i + 1) * w]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, value, rg))
    }

    /// `x: [n, C]`, one column per row → `[n]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::shape(format!("pick {} from {shape:?}", idx.len())));
        }
        let c = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let xd = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &j)| xd[r * c + j]).collect();
        let value = Tensor::new(vec![idx.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Pick { x, idx: idx.to_vec() }, value, rg))
    }

    /// Euclidean norm of each row: `[n, D] → [n]`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("row_norm of {shape:?}")));
        }
        let out = self
            .value(x)
            .data()
            .chunks(shape[1])
            .map(|r| kernels::dot(r, r).sqrt())
            .collect();
        let value = Tensor::new(vec![shape[0]], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::RowNorm(x), value, rg))
    }

    /// DTW distance of each pair `a[i]`, `b[i]` of `[n, M, D]` sequences, shape `[n]`.
    /// The gradient flows along the optimal warping path recovered in the forward pass.
    pub fn dtw(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape(format!("dtw: {sa:?} vs {sb:?}")));
        }
        let (n, ma, width) = (sa[0], sa[1], sa[2]);
        let mb = sb[1];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut dist = Vec::with_capacity(n);
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let sa_i = &ad[i * ma * width..(i + 1) * ma * width];
            let sb_i = &bd[i * mb * width..(i + 1) * mb * width];
            let r = dtw::dtw_flat(sa_i, ma, sb_i, mb, width)?;
            dist.push(r.distance);
            paths.push(r.path);
        }
        let value = Tensor::new(vec![n], dist)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Dtw { a, b, paths }, value, rg))
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates d`loss` to every node that requires a gradient. Leaf
    /// gradients accumulate across calls; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&self.nodes, &mut self.grads, loss, |g| g[0] += S::one());
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
    f(g);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sub = matches!(node.op, Op::Sub(..));
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                let n = gb.len();
                for chunk in g.chunks(n) {
                    for (d, &s) in gb.iter_mut().zip(chunk) {
                        if sub {
                            *d -= s
                        } else {
                            *d += s
                        }
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |gx| {
            for (d, &gi) in gx.iter_mut().zip(g) {
                *d += gi * *c;
            }
        }),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, g)),
        Op::MatMul(a, b) => {
            let sb = nodes[b.0].value.shape();
            let (k, n) = (sb[0], sb[1]);
            let m = nodes[a.0].value.len() / k;
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| kernels::gemm_nt(g, bv, ga, m, n, k));
            accumulate(nodes, grads, *b, |gb| kernels::gemm_tn(av, g, gb, k, m, n));
        }
        Op::Bmm { a, b, trans_b } => {
            let sa = nodes[a.0].value.shape();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = node.value.shape()[2];
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        kernels::gemm_nn(gi, bi, gai, m, n, k);
                    } else {
                        kernels::gemm_nt(gi, bi, gai, m, n, k);
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        kernels::gemm_tn(gi, ai, gbi, n, m, k);
                    } else {
                        kernels::gemm_tn(ai, gi, gbi, k, m, n);
                    }
                }
            });
        }
        Op::Conv1d { x, w, dims } => {
            let (xv, wv) = (val(*x), val(*w));
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            let mut dx = need_x.then(|| vec![S::zero(); xv.len()]);
            let mut dw = need_w.then(|| vec![S::zero(); wv.len()]);
            kernels::conv1d_backward(xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), *dims);
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, |gx| add_into(gx, &dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, |gw| add_into(gw, &dw));
            }
        }
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            kind,
        } => {
            let gam = val(*gamma);
            let c = gam.len();
            accumulate(nodes, grads, *gamma, |gg| {
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            });
            accumulate(nodes, grads, *beta, |gb| {
                for gr in g.chunks(c) {
                    add_into(gb, gr);
                }
            });
            accumulate(nodes, grads, *x, |gx| match kind {
                NormKind::BatchEval => {
                    for (dx, gr) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            dx[j] += gr[j] * gam[j] * inv_std[j];
                        }
                    }
                }
                NormKind::BatchTrain => {
                    let count = g.len() / c;
                    let nf = S::from_usize(count).unwrap();
                    let mut s1 = vec![S::zero(); c];
                    let mut s2 = vec![S::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1[j] += dh;
                            s2[j] += dh * hr[j];
                        }
                    }
                    for ((dx, gr), hr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dx[j] += inv_std[j] / nf * (nf * dh - s1[j] - hr[j] * s2[j]);
                        }
                    }
                }
                NormKind::Layer => {
                    let nf = S::from_usize(c).unwrap();
                    for (((dx, gr), hr), &is) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).zip(inv_std) {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dx[j] += is / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > S::zero() {
                        *d += gi;
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gi * kernels::gelu_grad(v);
                }
            });
        }
        Op::Sigmoid(x) => {
            let yv = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(yv) {
                    *d += gi * y * (S::one() - y);
                }
            });
        }
        Op::Exp(x) => {
            let yv = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(yv) {
                    *d += gi * y;
                }
            });
        }
        Op::Log(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += gi / v;
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |gx| {
                for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > *lo && v < *hi {
                        *d += gi;
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let yv = node.value.data();
            let n = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for ((dx, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(yv.chunks(n)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..n {
                        dx[j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            let yv = node.value.data();
            let n = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *x, |gx| {
                for ((dx, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(yv.chunks(n)) {
                    let s: S = gr.iter().copied().sum();
                    for j in 0..n {
                        dx[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (pre, total, post) = split_at_axis(shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let s = nodes[v.0].value.shape()[*axis];
                accumulate(nodes, grads, v, |gv| {
                    for p in 0..pre {
                        let src = &g[(p * total + offset) * post..(p * total + offset + s) * post];
                        add_into(&mut gv[p * s * post..(p + 1) * s * post], src);
                    }
                });
                offset += s;
            }
        }
        Op::SumAxis { x, axis } => {
            let shape = nodes[x.0].value.shape();
            let (pre, ax, post) = split_at_axis(shape, *axis);
            accumulate(nodes, grads, *x, |gx| {
                for p in 0..pre {
                    let src = &g[p * post..(p + 1) * post];
                    for a in 0..ax {
                        let base = (p * ax + a) * post;
                        add_into(&mut gx[base..base + post], src);
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, |gx| {
            for d in gx.iter_mut() {
                *d += g[0];
            }
        }),
        Op::GatherRows { x, idx } => {
            let w = node.value.len() / idx.len();
            accumulate(nodes, grads, *x, |gx| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::Pick { x, idx } => {
            let c = nodes[x.0].value.shape()[1];
            accumulate(nodes, grads, *x, |gx| {
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * c + j] += g[r];
                }
            });
        }
        Op::RowNorm(x) => {
            let xv = val(*x);
            let w = nodes[x.0].value.shape()[1];
            let norms = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for (r, (dx, xr)) in gx.chunks_mut(w).zip(xv.chunks(w)).enumerate() {
                    if norms[r] > S::zero() {
                        let f = g[r] / norms[r];
                        for j in 0..w {
                            dx[j] += f * xr[j];
                        }
                    }
                }
            });
        }
        Op::Dtw { a, b, paths } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (ma, width, mb) = (sa[1], sa[2], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            let mut da = vec![S::zero(); av.len()];
            let mut db = vec![S::zero(); bv.len()];
            for (n, path) in paths.iter().enumerate() {
                let a_off = n * ma * width;
                let b_off = n * mb * width;
                dtw::path_gradient(
                    &av[a_off..a_off + ma * width],
                    &bv[b_off..b_off + mb * width],
                    width,
                    path,
                    g[n],
                    &mut da[a_off..a_off + ma * width],
                    &mut db[b_off..b_off + mb * width],
                );
            }
            accumulate(nodes, grads, *a, |ga| add_into(ga, &da));
            accumulate(nodes, grads, *b, |gb| add_into(gb, &db));
        }
    }
}
