//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to replay the chain rule. Node indices are a topological order, so
//! `backward` is a single reverse sweep.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::tensor::{broadcast_index, broadcast_shape, split_axis, strides};
use crate::tensorcore::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Abs(Var),
    SmoothL1(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis(Var, usize),
    Sum(Var),
    Mean(Var),
    Chamfer {
        pred: Var,
        grad_pred: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    CosineRows {
        a: Var,
        b: Var,
        saved: Vec<(T, T, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    live: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, live: bool) -> Var {
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter. Repeated calls with the same id return the
    /// same node, so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Identity forward; the result has no backward record.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect::<Vec<_>>()
        } else {
            let out = broadcast_shape(va.shape(), vb.shape())
                .ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
            let ia = broadcast_index(&out, va.shape());
            let ib = broadcast_index(&out, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            return self.finish_binary(&out, data, a, b, op);
        };
        let shape = va.shape().to_vec();
        self.finish_binary(&shape, data, a, b, op)
    }

    fn finish_binary(
        &mut self,
        shape: &[usize],
        data: Vec<T>,
        a: Var,
        b: Var,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let live = self.live(a) || self.live(b);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op(a, b), live))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let live = self.live(x);
        self.push(value, op, live)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Huber loss with unit threshold, elementwise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        self.unary(
            x,
            |v| {
                if v.abs() < T::one() {
                    half * v * v
                } else {
                    v.abs() - half
                }
            },
            Op::SmoothL1(x),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.cos(), Op::Cos(x))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Leading batch axes must match, or one operand must be rank 2 and is
    /// then shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let layout = MatLayout::new(sa, sb).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let mut out = vec![T::zero(); layout.batch * layout.r * layout.t];
        layout.forward(va.data(), vb.data(), &mut out);
        let value = Tensor::new(&layout.out_shape, out)?;
        let live = self.live(a) || self.live(b);
        Ok(self.push(value, Op::MatMul(a, b), live))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let live = self.live(x);
        Ok(self.push(value, Op::Reshape(x), live))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", src.shape(), perm));
        }
        let index = permute_index(src.shape(), perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| src.shape()[p]).collect();
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(&out_shape, data)?;
        let live = self.live(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), live))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[2]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if broadcast_shape(src.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::shape("expand", src.shape(), shape));
        }
        let index = broadcast_index(shape, src.shape());
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let live = self.live(x);
        Ok(self.push(value, Op::Expand(x), live))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(Error::shape("softmax", src.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(out[at(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        let live = self.live(x);
        Ok(self.push(value, Op::Softmax(x, axis), live))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        let d = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &[], &[]))?;
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    src.shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.numel() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); src.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.numel()];
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        let live = self.live(x) || self.live(gain) || self.live(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            live,
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        let live = parts.iter().any(|&p| self.live(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), live))
    }

    /// Takes `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() || len == 0 || start + len > src.shape()[axis] {
            return Err(Error::shape("slice", src.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(src.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        let live = self.live(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, live))
    }

    /// Selects entries along `axis`. `index` holds either one shared list or
    /// one list per outer position (all of equal length).
    pub fn gather(&mut self, x: Var, axis: usize, index: &[Vec<usize>]) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(Error::shape("gather", src.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let picks = index.first().map_or(0, Vec::len);
        let per_outer = index.len() == outer;
        if picks == 0
            || !(index.len() == 1 || per_outer)
            || index
                .iter()
                .any(|ix| ix.len() != picks || ix.iter().any(|&i| i >= len))
        {
            return Err(Error::contract(format!(
                "gather: bad index for shape {:?} along axis {axis}",
                src.shape()
            )));
        }
        let mut flat = Vec::with_capacity(outer * picks);
        let mut data = Vec::with_capacity(outer * picks * inner);
        for o in 0..outer {
            let ix = if per_outer { &index[o] } else { &index[0] };
            for &i in ix {
                flat.push(i);
                let base = o * len * inner + i * inner;
                data.extend_from_slice(&src.data()[base..base + inner]);
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = picks;
        let value = Tensor::new(&shape, data)?;
        let live = self.live(x);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                axis,
                index: flat,
            },
            live,
        ))
    }

    /// Maximum along `axis`, which is removed. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(Error::shape("max_axis", src.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut argmax = Vec::with_capacity(outer * inner);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let at = o * len * inner + j * inner + i;
                    if src.data()[at] > src.data()[best] {
                        best = at;
                    }
                }
                argmax.push(best);
                data.push(src.data()[best]);
            }
        }
        let shape = reduced_shape(src.shape(), axis);
        let value = Tensor::new(&shape, data)?;
        let live = self.live(x);
        Ok(self.push(value, Op::MaxAxis { x, argmax }, live))
    }

    /// Mean along `axis`, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(Error::shape("mean_axis", src.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let scale = T::one() / T::from_usize(len).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src.data()[o * len * inner + j * inner..][..inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|d| *d *= scale);
        let shape = reduced_shape(src.shape(), axis);
        let value = Tensor::new(&shape, data)?;
        let live = self.live(x);
        Ok(self.push(value, Op::MeanAxis(x, axis), live))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let live = self.live(x);
        self.push(Tensor::scalar(total), Op::Sum(x), live)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let live = self.live(x);
        self.push(Tensor::scalar(total), Op::Mean(x), live)
    }

    /// Mean over patches of the squared-distance Chamfer between `pred`
    /// (`[P, a, 3]`) and a fixed `target` (`[P, b, 3]`).
    pub fn chamfer(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let vp = self.value(pred);
        let (sp, st) = (vp.shape(), target.shape());
        if sp.len() != 3 || st.len() != 3 || sp[0] != st[0] || sp[2] != 3 || st[2] != 3 {
            return Err(Error::shape("chamfer", sp, st));
        }
        let (patches, na, nb) = (sp[0], sp[1], st[1]);
        let mut grad_pred = vec![T::zero(); vp.numel()];
        let mut total = T::zero();
        let two = T::lit(2.0);
        let (inv_a, inv_b) = (
            T::one() / T::from_usize(na).unwrap(),
            T::one() / T::from_usize(nb).unwrap(),
        );
        for p in 0..patches {
            let a = &vp.data()[p * na * 3..(p + 1) * na * 3];
            let b = &target.data()[p * nb * 3..(p + 1) * nb * 3];
            let g = &mut grad_pred[p * na * 3..(p + 1) * na * 3];
            let mut best_b = vec![(T::infinity(), 0usize); nb];
            for i in 0..na {
                let mut best = (T::infinity(), 0usize);
                for j in 0..nb {
                    let d = sq_dist(&a[i * 3..i * 3 + 3], &b[j * 3..j * 3 + 3]);
                    if d < best.0 {
                        best = (d, j);
                    }
                    if d < best_b[j].0 {
                        best_b[j] = (d, i);
                    }
                }
                total += best.0 * inv_a;
                for c in 0..3 {
                    g[i * 3 + c] += two * inv_a * (a[i * 3 + c] - b[best.1 * 3 + c]);
                }
            }
            for (j, &(d, i)) in best_b.iter().enumerate() {
                total += d * inv_b;
                for c in 0..3 {
                    g[i * 3 + c] += two * inv_b * (a[i * 3 + c] - b[j * 3 + c]);
                }
            }
        }
        let np = T::from_usize(patches).unwrap();
        grad_pred.iter_mut().for_each(|g| *g /= np);
        let value = Tensor::scalar(total / np);
        let live = self.live(pred);
        Ok(self.push(value, Op::Chamfer { pred, grad_pred }, live))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (rows, classes) = (s[0], s[1]);
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &v.data()[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[labels[r]];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / T::from_usize(rows).unwrap());
        let live = self.live(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            live,
        ))
    }

    /// Cosine similarity of matching rows along the last axis.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rank() == 0 {
            return Err(Error::shape("cosine_rows", va.shape(), vb.shape()));
        }
        let d = *va.shape().last().unwrap();
        let rows = va.numel() / d;
        let eps = T::lit(1e-8);
        let mut saved = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (
                &va.data()[r * d..(r + 1) * d],
                &vb.data()[r * d..(r + 1) * d],
            );
            let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
            let nx = x.iter().map(|&p| p * p).sum::<T>().sqrt().max(eps);
            let ny = y.iter().map(|&q| q * q).sum::<T>().sqrt().max(eps);
            saved.push((dot, nx, ny));
            out.push(dot / (nx * ny));
        }
        let shape = va.shape()[..va.rank() - 1].to_vec();
        let value = Tensor::new(&shape, out)?;
        let live = self.live(a) || self.live(b);
        Ok(self.push(value, Op::CosineRows { a, b, saved }, live))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.live {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(node, g, lower)?;
        }
        Ok(Gradients {
            per_node: grads,
            shapes: self.nodes[..=loss.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                self.reduce_into(*a, out_shape, g, grads, |_, x| x);
                if negate {
                    self.reduce_into(*b, out_shape, g, grads, |_, x| -x);
                } else {
                    self.reduce_into(*b, out_shape, g, grads, |_, x| x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ia = broadcast_index(out_shape, va.shape());
                let ib = broadcast_index(out_shape, vb.shape());
                if self.live(*a) {
                    let ga = slot(grads, *a, va.numel());
                    for k in 0..g.len() {
                        ga[ia[k]] += g[k] * vb.data()[ib[k]];
                    }
                }
                if self.live(*b) {
                    let gb = slot(grads, *b, vb.numel());
                    for k in 0..g.len() {
                        gb[ib[k]] += g[k] * va.data()[ia[k]];
                    }
                }
            }
            Op::Scale(x, c) => self.elementwise_into(*x, g, grads, |_, gi| gi * *c),
            Op::Square(x) => {
                let two = T::lit(2.0);
                self.elementwise_into(*x, g, grads, |v, gi| gi * two * v)
            }
            Op::Abs(x) => self.elementwise_into(*x, g, grads, |v, gi| gi * sign(v)),
            Op::SmoothL1(x) => self.elementwise_into(*x, g, grads, |v, gi| {
                if v.abs() < T::one() {
                    gi * v
                } else {
                    gi * sign(v)
                }
            }),
            Op::Gelu(x) => self.elementwise_into(*x, g, grads, |v, gi| gi * gelu_grad(v)),
            Op::Sin(x) => self.elementwise_into(*x, g, grads, |v, gi| gi * v.cos()),
            Op::Cos(x) => self.elementwise_into(*x, g, grads, |v, gi| -gi * v.sin()),
            Op::Relu(x) => {
                self.elementwise_into(
                    *x,
                    g,
                    grads,
                    |v, gi| {
                        if v > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    },
                )
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let layout = MatLayout::new(va.shape(), vb.shape()).expect("validated in forward");
                if self.live(*a) {
                    let ga = slot(grads, *a, va.numel());
                    layout.grad_lhs(g, vb.data(), ga);
                }
                if self.live(*b) {
                    let gb = slot(grads, *b, vb.numel());
                    layout.grad_rhs(va.data(), g, gb);
                }
            }
            Op::Reshape(x) => self.elementwise_into(*x, g, grads, |_, gi| gi),
            Op::Permute(x, perm) => {
                if self.live(*x) {
                    let src = self.value(*x);
                    let index = permute_index(src.shape(), perm);
                    let gx = slot(grads, *x, src.numel());
                    for (k, &i) in index.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::Expand(x) => self.reduce_into(*x, out_shape, g, grads, |_, v| v),
            Op::Softmax(x, axis) => {
                if self.live(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let gx = slot(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                if self.live(*gain) {
                    let gg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.live(*bias) {
                    let gb = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.live(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let gx = slot(grads, *x, rows * d);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                let total = out_shape[*axis] * inner;
                for &p in parts {
                    let n = self.value(p).shape()[*axis] * inner;
                    if self.live(p) {
                        let numel = self.value(p).numel();
                        let gp = slot(grads, p, numel);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + n];
                            for (d, &s) in gp[o * n..(o + 1) * n].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.live(*x) {
                    let src_shape = self.value(*x).shape();
                    let (outer, full, inner) = split_axis(src_shape, *axis);
                    let len = out_shape[*axis];
                    let gx = slot(grads, *x, outer * full * inner);
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { x, axis, index } => {
                if self.live(*x) {
                    let src_shape = self.value(*x).shape();
                    let (outer, len, inner) = split_axis(src_shape, *axis);
                    let picks = out_shape[*axis];
                    let gx = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for p in 0..picks {
                            let i = index[o * picks + p];
                            let dst = o * len * inner + i * inner;
                            let src = &g[(o * picks + p) * inner..][..inner];
                            for (d, &s) in gx[dst..dst + inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                if self.live(*x) {
                    let numel = self.value(*x).numel();
                    let gx = slot(grads, *x, numel);
                    for (k, &i) in argmax.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                if self.live(*x) {
                    let src_shape = self.value(*x).shape();
                    let (outer, len, inner) = split_axis(src_shape, *axis);
                    let scale = T::one() / T::from_usize(len).unwrap();
                    let gx = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = o * len * inner + j * inner;
                            for i in 0..inner {
                                gx[dst + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => self.elementwise_into(*x, &[], grads, |_, _| g[0]),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                self.elementwise_into(*x, &[], grads, |_, _| g[0] / n)
            }
            Op::Chamfer {
                pred, grad_pred, ..
            } => {
                if self.live(*pred) {
                    let gp = slot(grads, *pred, grad_pred.len());
                    for (d, &s) in gp.iter_mut().zip(grad_pred) {
                        *d += g[0] * s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.live(*logits) {
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let scale = g[0] / T::from_usize(rows).unwrap();
                    let gl = slot(grads, *logits, probs.len());
                    for r in 0..rows {
                        for c in 0..classes {
                            let onehot = if c == labels[r] { T::one() } else { T::zero() };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::CosineRows { a, b, saved } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = *va.shape().last().unwrap();
                for (which, (this, (own, other))) in
                    [(*a, (va, vb)), (*b, (vb, va))].into_iter().enumerate()
                {
                    if !self.live(this) {
                        continue;
                    }
                    let gx = slot(grads, this, va.numel());
                    for (r, &(dot, nx, ny)) in saved.iter().enumerate() {
                        let (n_self, n_other) = if which == 0 { (nx, ny) } else { (ny, nx) };
                        let xs = &own.data()[r * d..(r + 1) * d];
                        let ys = &other.data()[r * d..(r + 1) * d];
                        let denom = n_self * n_other;
                        for j in 0..d {
                            let dj = ys[j] / denom - dot * xs[j] / (n_self * n_self * denom);
                            gx[r * d + j] += g[r] * dj;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates `f(x_value, g)` elementwise into `x`'s gradient. An empty
    /// `g` means the callback ignores it (reductions to a scalar).
    fn elementwise_into(
        &self,
        x: Var,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(T, T) -> T,
    ) {
        if !self.live(x) {
            return;
        }
        let xv = self.value(x).data();
        let gx = slot(grads, x, xv.len());
        if g.is_empty() {
            for (d, &v) in gx.iter_mut().zip(xv) {
                *d += f(v, T::zero());
            }
        } else {
            for ((d, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                *d += f(v, gi);
            }
        }
    }

    /// Sums a broadcast gradient back onto `x`'s shape.
    fn reduce_into(
        &self,
        x: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(T, T) -> T,
    ) {
        if !self.live(x) {
            return;
        }
        let xv = self.value(x);
        let gx = slot(grads, x, xv.numel());
        if xv.shape() == out_shape {
            for (d, &gi) in gx.iter_mut().zip(g) {
                *d += f(T::zero(), gi);
            }
        } else {
            let index = broadcast_index(out_shape, xv.shape());
            for (k, &i) in index.iter().enumerate() {
                gx[i] += f(T::zero(), g[k]);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// For every flat output index of a permutation, the flat source index.
fn permute_index(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        index.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    index
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// How the operands of a batched matmul line up.
struct MatLayout {
    batch: usize,
    r: usize,
    s: usize,
    t: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatLayout {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return None;
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (r, s) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (s2, t) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if s != s2 {
            return None;
        }
        let batch_dims = if ba == bb || bb.is_empty() {
            ba
        } else if ba.is_empty() {
            bb
        } else {
            return None;
        };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([r, t]);
        Some(MatLayout {
            batch: batch_dims.iter().product(),
            r,
            s,
            t,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (r, s, t) = (self.r, self.s, self.t);
        if self.a_batched && !self.b_batched {
            // Shared rhs: fold the batch into the row dimension.
            gemm(self.batch * r, s, t, a, (s, 1), b, (t, 1), c, false);
            return;
        }
        for i in 0..self.batch {
            let ao = if self.a_batched { i * r * s } else { 0 };
            let bo = if self.b_batched { i * s * t } else { 0 };
            gemm(
                r,
                s,
                t,
                &a[ao..],
                (s, 1),
                &b[bo..],
                (t, 1),
                &mut c[i * r * t..],
                false,
            );
        }
    }

    /// dA = dC · Bᵀ
    fn grad_lhs<T: Scalar>(&self, g: &[T], b: &[T], ga: &mut [T]) {
        let (r, s, t) = (self.r, self.s, self.t);
        if self.a_batched && !self.b_batched {
            gemm(self.batch * r, t, s, g, (t, 1), b, (1, t), ga, true);
            return;
        }
        for i in 0..self.batch {
            let ao = if self.a_batched { i * r * s } else { 0 };
            let bo = if self.b_batched { i * s * t } else { 0 };
            gemm(
                r,
                t,
                s,
                &g[i * r * t..],
                (t, 1),
                &b[bo..],
                (1, t),
                &mut ga[ao..],
                true,
            );
        }
    }

    /// dB = Aᵀ · dC
    fn grad_rhs<T: Scalar>(&self, a: &[T], g: &[T], gb: &mut [T]) {
        let (r, s, t) = (self.r, self.s, self.t);
        if self.a_batched && !self.b_batched {
            gemm(s, self.batch * r, t, a, (1, s), g, (t, 1), gb, true);
            return;
        }
        for i in 0..self.batch {
            let ao = if self.a_batched { i * r * s } else { 0 };
            let bo = if self.b_batched { i * s * t } else { 0 };
            gemm(
                s,
                r,
                t,
                &a[ao..],
                (1, s),
                &g[i * r * t..],
                (t, 1),
                &mut gb[bo..],
                true,
            );
        }
    }
}

/// Row-major `c (m x n) [+]= a (m x k) · b (k x n)` with explicit strides
/// `(row, col)` for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    let a_span = (m - 1) * rsa + (k - 1) * csa + 1;
    let b_span = (k - 1) * rsb + (n - 1) * csb + 1;
    assert!(a.len() >= a_span && b.len() >= b_span && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients from one backward sweep.
pub struct Gradients<T> {
    per_node: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.per_node.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Gradients for every parameter of `store`, indexed by `ParamId`.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store.ids().map(|id| self.param(id)).collect()
    }

    /// Parameter name to gradient, for parameters on a path to the loss.
    pub fn named(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .ids()
            .filter_map(|id| self.param(id).map(|g| (store.name(id).to_string(), g)))
            .collect()
    }
}
