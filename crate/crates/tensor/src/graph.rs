// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its adjoint. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep.

use crate::param::{ParamId, ParamSet};
use crate::scalar::{gemm, MatView, MatViewMut};
use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.044715;

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every parameter that influenced it.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Gradients {
            grads: params
                .iter()
                .map(|(_, p)| Some(Tensor::zeros(p.value.shape().to_vec())))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(id.index()).and_then(|g| g.as_mut())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => {
                        for (a, &b) in d.data_mut().iter_mut().zip(src.data()) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }
}

/// A recording of tensor operations over a borrowed parameter set.
pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf for a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Whether the recording read parameter `id`.
    pub fn uses_param(&self, id: ParamId) -> bool {
        self.param_vars[id.index()].is_some()
    }

    /// Copies the value into a new constant node, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Input, false)
    }

    /// Softmax probabilities saved by an attention node, laid out as
    /// `[groups][heads][query rows][key rows]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs, heads, groups, ..
            } => Some((probs, *heads, *groups)),
            _ => None,
        }
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k) = dims2(sa);
        let n = sb[1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::dense(self.value(a).data(), m, k),
            MatView::dense(self.value(b).data(), k, n),
            T::zero(),
            MatViewMut::dense(&mut out, m, n),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let cols = *sa.last().unwrap();
        if sr.iter().product::<usize>() != cols || (sr.len() != 1 && sr[0] != 1) {
            return Err(TensorError::shape(name, sa, sr));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, op, ng))
    }

    /// Adds a length-`n` vector to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a[.., n]` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(GELU_K);
        let half = T::of(0.5);
        self.map(
            a,
            |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, T::one());
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(TensorError::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::from_usize(cols).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / cols;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Concatenates 2-D views of the parts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(TensorError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks 2-D views of the parts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(TensorError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end` of the 2-D view of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if start >= end || end > cols {
            return Err(TensorError::Index { index: end, len: cols });
        }
        let rows = v.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows, end - start], out)?,
            Op::SliceCols { x, start },
            ng,
        ))
    }

    /// Selects (and possibly repeats) rows of the 2-D view of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.rows();
        if index.is_empty() {
            return Err(TensorError::Config("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(index.len() * v.cols());
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index { index: i, len: rows });
            }
            out.extend_from_slice(v.row(i));
        }
        let cols = v.cols();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), cols], out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let index: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &index)
    }

    /// Repeats all rows of `x` `times` times, block after block.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        let index: Vec<usize> = (0..times).flat_map(|_| 0..rows).collect();
        self.gather_rows(x, &index)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Multi-head scaled dot-product attention core, without projections.
    ///
    /// `q` is `[groups·Lq, d]`, `k` and `v` are `[groups·Lk, d]`; each
    /// group of query rows attends only to the key rows of the same group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (rq, d) = dims2(self.shape(q));
        let (rk, dk) = dims2(self.shape(k));
        if self.shape(k) != self.shape(v) || dk != d {
            return Err(TensorError::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        if groups == 0 || rq % groups != 0 || rk % groups != 0 {
            return Err(TensorError::Config(format!(
                "attention rows {rq}/{rk} not divisible into {groups} groups"
            )));
        }
        let (lq, lk, dh) = (rq / groups, rk / groups, d / heads);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); groups * heads * lq * lk];
        let mut out = vec![T::zero(); rq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * lq * lk..(g * heads + h + 1) * lq * lk];
                let qv = head_view(qd, g * lq, lq, h * dh, dh, d);
                let kv = head_view(kd, g * lk, lk, h * dh, dh, d);
                gemm(qv, kv.t(), T::zero(), MatViewMut::dense(p, lq, lk));
                for row in p.chunks_mut(lk) {
                    softmax_in_place(row, scale);
                }
                let vv = head_view(vd, g * lk, lk, h * dh, dh, d);
                let ov = MatViewMut {
                    data: &mut out,
                    offset: g * lq * d + h * dh,
                    rows: lq,
                    cols: dh,
                    rs: d,
                };
                gemm(MatView::dense(p, lq, lk), vv, T::zero(), ov);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![rq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Config(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, gout, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gout: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let nodes = &self.nodes;
        // Accumulates into the gradient buffer of `v`, allocating it on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let shape = node.value.shape().to_vec();
                out.grads[id.index()] = Some(Tensor::new(shape, gout)?);
            }
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(a));
                let n = self.shape(b)[1];
                acc(a, &mut |ga| {
                    gemm(
                        MatView::dense(&gout, m, n),
                        MatView::dense(val(b), k, n).t(),
                        T::one(),
                        MatViewMut::dense(ga, m, k),
                    )
                });
                acc(b, &mut |gb| {
                    gemm(
                        MatView::dense(val(a), m, k).t(),
                        MatView::dense(&gout, m, n),
                        T::one(),
                        MatViewMut::dense(gb, k, n),
                    )
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, &gout));
                acc(b, &mut |g| add_into(g, &gout));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |g| add_into(g, &gout));
                acc(b, &mut |g| g.iter_mut().zip(&gout).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |g| {
                    for ((x, &go), &bv) in g.iter_mut().zip(&gout).zip(val(b)) {
                        *x += go * bv;
                    }
                });
                acc(b, &mut |g| {
                    for ((x, &go), &av) in g.iter_mut().zip(&gout).zip(val(a)) {
                        *x += go * av;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                acc(a, &mut |g| add_into(g, &gout));
                let cols = self.value(row).numel();
                acc(row, &mut |g| {
                    for chunk in gout.chunks(cols) {
                        add_into(g, chunk);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let cols = self.value(row).numel();
                let r = val(row);
                acc(a, &mut |g| {
                    for (gc, oc) in g.chunks_mut(cols).zip(gout.chunks(cols)) {
                        for ((x, &go), &rv) in gc.iter_mut().zip(oc).zip(r) {
                            *x += go * rv;
                        }
                    }
                });
                let av = val(a);
                acc(row, &mut |g| {
                    for (oc, ac) in gout.chunks(cols).zip(av.chunks(cols)) {
                        for ((x, &go), &a) in g.iter_mut().zip(oc).zip(ac) {
                            *x += go * a;
                        }
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |g| g.iter_mut().zip(&gout).for_each(|(x, &go)| *x += go * c)),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, &mut |g| add_into(g, &gout)),
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |g| {
                    for ((x, &go), &y) in g.iter_mut().zip(&gout).zip(y) {
                        *x += go * y * (T::one() - y);
                    }
                })
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                acc(a, &mut |g| {
                    for ((x, &go), &y) in g.iter_mut().zip(&gout).zip(y) {
                        *x += go * (T::one() - y * y);
                    }
                })
            }
            &Op::Gelu(a) => {
                let c = T::of((2.0 / std::f64::consts::PI).sqrt());
                let k = T::of(GELU_K);
                let half = T::of(0.5);
                let three = T::of(3.0);
                acc(a, &mut |g| {
                    for ((x, &go), &v) in g.iter_mut().zip(&gout).zip(val(a)) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let d =
                            half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *x += go * d;
                    }
                })
            }
            &Op::Relu(a) => acc(a, &mut |g| {
                for ((x, &go), &v) in g.iter_mut().zip(&gout).zip(val(a)) {
                    if v > T::zero() {
                        *x += go;
                    }
                }
            }),
            &Op::Abs(a) => acc(a, &mut |g| {
                for ((x, &go), &v) in g.iter_mut().zip(&gout).zip(val(a)) {
                    if v > T::zero() {
                        *x += go;
                    } else if v < T::zero() {
                        *x -= go;
                    }
                }
            }),
            &Op::Square(a) => acc(a, &mut |g| {
                let two = T::of(2.0);
                for ((x, &go), &v) in g.iter_mut().zip(&gout).zip(val(a)) {
                    *x += go * two * v;
                }
            }),
            &Op::Softmax(a) => {
                let cols = node.value.cols();
                let y = node.value.data();
                acc(a, &mut |g| {
                    for ((gc, oc), yc) in g.chunks_mut(cols).zip(gout.chunks(cols)).zip(y.chunks(cols)) {
                        softmax_backward_acc(gc, oc, yc, T::one());
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let n = T::from_usize(cols).unwrap();
                let gm = val(*gamma);
                acc(*x, &mut |g| {
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let go = &gout[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            dxhat[c] = go[c] * gm[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xh[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        let gr = &mut g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gr[c] += rs * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (oc, xc) in gout.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            g[c] += oc[c] * xc[c];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for oc in gout.chunks(cols) {
                        add_into(g, oc);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |g| {
                        for (gr, orow) in g.chunks_mut(w).zip(gout.chunks(total)) {
                            add_into(gr, &orow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |g| add_into(g, &gout[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let cols = self.value(x).cols();
                acc(x, &mut |g| {
                    for (gr, orow) in g.chunks_mut(cols).zip(gout.chunks(w)) {
                        add_into(&mut gr[start..start + w], orow);
                    }
                })
            }
            Op::GatherRows { x, index } => {
                let cols = node.value.cols();
                acc(*x, &mut |g| {
                    for (orow, &i) in gout.chunks(cols).zip(index) {
                        add_into(&mut g[i * cols..(i + 1) * cols], orow);
                    }
                })
            }
            &Op::Sum(x) => {
                let go = gout[0];
                acc(x, &mut |g| g.iter_mut().for_each(|v| *v += go))
            }
            &Op::Mean(x) => {
                let go = gout[0] / T::from_usize(self.value(x).numel()).unwrap();
                acc(x, &mut |g| g.iter_mut().for_each(|v| *v += go))
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (q, k, v, heads, groups) = (*q, *k, *v, *heads, *groups);
                let (dq, dk, dv) = attention_backward(
                    val(q),
                    val(k),
                    val(v),
                    probs,
                    &gout,
                    self.value(q).rows(),
                    self.value(k).rows(),
                    self.value(q).cols(),
                    heads,
                    groups,
                );
                acc(q, &mut |g| add_into(g, &dq));
                acc(k, &mut |g| add_into(g, &dk));
                acc(v, &mut |g| add_into(g, &dv));
            }
        }
        Ok(())
    }
}

fn head_view<T>(data: &[T], row0: usize, rows: usize, col0: usize, cols: usize, stride: usize) -> MatView<'_, T> {
    MatView {
        data,
        offset: row0 * stride + col0,
        rows,
        cols,
        rs: stride,
        cs: 1,
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Softmax of `scale * row`, in place.
fn softmax_in_place<T: Scalar>(row: &mut [T], scale: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x * scale));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x * scale - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Accumulates the adjoint of `softmax(scale * s)` into `g`.
fn softmax_backward_acc<T: Scalar>(g: &mut [T], gout: &[T], y: &[T], scale: T) {
    let dot: T = gout.iter().zip(y).map(|(&a, &b)| a * b).sum();
    for ((x, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
        *x += scale * yv * (go - dot);
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    rq: usize,
    rk: usize,
    d: usize,
    heads: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (lq, lk, dh) = (rq / groups, rk / groups, d / heads);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); rq * d];
    let mut dk = vec![T::zero(); rk * d];
    let mut dv = vec![T::zero(); rk * d];
    let mut dp = vec![T::zero(); lq * lk];
    let mut ds = vec![T::zero(); lq * lk];
    for g in 0..groups {
        for h in 0..heads {
            let p = &probs[(g * heads + h) * lq * lk..(g * heads + h + 1) * lq * lk];
            let go = head_view(gout, g * lq, lq, h * dh, dh, d);
            // dP = dO · Vᵀ
            gemm(
                go,
                head_view(v, g * lk, lk, h * dh, dh, d).t(),
                T::zero(),
                MatViewMut::dense(&mut dp, lq, lk),
            );
            // dV += Pᵀ · dO
            gemm(
                MatView::dense(p, lq, lk).t(),
                go,
                T::one(),
                MatViewMut {
                    data: &mut dv,
                    offset: g * lk * d + h * dh,
                    rows: lk,
                    cols: dh,
                    rs: d,
                },
            );
            ds.iter_mut().for_each(|x| *x = T::zero());
            for ((dsr, dpr), pr) in ds.chunks_mut(lk).zip(dp.chunks(lk)).zip(p.chunks(lk)) {
                softmax_backward_acc(dsr, dpr, pr, scale);
            }
            // dQ += dS · K, dK += dSᵀ · Q
            gemm(
                MatView::dense(&ds, lq, lk),
                head_view(k, g * lk, lk, h * dh, dh, d),
                T::one(),
                MatViewMut {
                    data: &mut dq,
                    offset: g * lq * d + h * dh,
                    rows: lq,
                    cols: dh,
                    rs: d,
                },
            );
            gemm(
                MatView::dense(&ds, lq, lk).t(),
                head_view(q, g * lq, lq, h * dh, dh, d),
                T::one(),
                MatViewMut {
                    data: &mut dk,
                    offset: g * lk * d + h * dh,
                    rows: lk,
                    cols: dh,
                    rs: d,
                },
            );
        }
    }
    (dq, dk, dv)
}
