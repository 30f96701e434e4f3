//! Reverse-mode automatic differentiation over a single-threaded tape.
//!
//! Every op evaluates eagerly and appends a node holding its output and
//! whatever it needs for the backward pass. Parameters enter the tape by
//! reference, so building a tape never copies model weights.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::ops::Deref;

use crate::error::{domain, Error, Result};
use crate::real::Real;
use crate::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Block {
        x: Var,
        r0: usize,
        c0: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    grad: bool,
    param: Option<usize>,
}

/// Records operations for one forward pass.
pub struct Tape<'p, T: Real> {
    nodes: RefCell<Vec<Node<'p, T>>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
        }
    }

    /// A tape that fails any op producing NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<'p, T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFiniteOp(name));
        }
        let grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|v| nodes[v.0].grad)
        };
        Ok(self.push_node(Node {
            value: Value::Owned(value),
            op,
            grad,
            param: None,
        }))
    }

    /// Model parameter `index`, borrowed for the tape's lifetime.
    pub fn param(&self, t: &'p Tensor<T>, index: usize) -> Var {
        self.push_node(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            grad: true,
            param: Some(index),
        })
    }

    /// Owned leaf that receives a gradient.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            grad: true,
            param: None,
        })
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Value::Owned(t),
            op: Op::Constant,
            grad: false,
            param: None,
        })
    }

    pub fn constant_ref(&self, t: &'p Tensor<T>) -> Var {
        self.push_node(Node {
            value: Value::Borrowed(t),
            op: Op::Constant,
            grad: false,
            param: None,
        })
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), "matmul_t")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(op, &sa, &sb));
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let data = {
            let (va, vb) = (self.value(a), self.value(b));
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect()
        };
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), "add")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let data = {
            let (va, vb) = (self.value(a), self.value(b));
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect()
        };
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), "relu")
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    buf[l] = out[(o * len + l) * inner + i];
                }
                crate::tensor::softmax_in_place(&mut buf);
                for l in 0..len {
                    out[(o * len + l) * inner + i] = buf[l];
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, "softmax")
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[1]))?;
        let (ng, nb) = (self.value(gain).numel(), self.value(bias).numel());
        if ng != d || nb != d {
            return Err(shape_err("layer_norm", &shape, &[ng, nb]));
        }
        let rows = self.value(x).numel() / d.max(1);
        let eps = T::from_f64(eps);
        let dt = T::from_f64(d as f64);
        let mut normed = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let xv = self.value(x);
            let (g, b) = (self.value(gain), self.value(bias));
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let n = (row[j] - mean) * inv;
                    normed[r * d + j] = n;
                    out[r * d + j] = n * g.data()[j] + b.data()[j];
                }
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Gathers rows of `table[V,d]`.
    pub fn embedding(&self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let t = self.value(table);
            for &id in ids {
                let id = id as usize;
                if id >= v {
                    return Err(domain(alloc::format!("embedding id {id} out of range {v}")));
                }
                out.extend_from_slice(t.row(id));
            }
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| domain("concat of zero tensors"))?;
        let mut shape = self.shape(*first);
        if axis >= shape.len() {
            return Err(shape_err("concat", &shape, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &shape, &s));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                let chunk = len * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        {
            let v = self.value(x);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                out.extend_from_slice(&v.data()[base..base + w * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = w;
        self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice { x, axis, start },
            "slice",
        )
    }

    /// Rectangular block `x[r0..r1, c0..c1]` of a matrix.
    pub fn block(&self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (r, c) = self.dims2(x, "block")?;
        let ((r0, r1), (c0, c1)) = (rows, cols);
        if r0 > r1 || r1 > r || c0 > c1 || c1 > c {
            return Err(shape_err("block", &[r, c], &[r0, r1, c0, c1]));
        }
        let w = c1 - c0;
        let mut out = Vec::with_capacity((r1 - r0) * w);
        {
            let v = self.value(x);
            for i in r0..r1 {
                out.extend_from_slice(&v.data()[i * c + c0..i * c + c1]);
            }
        }
        self.push(
            Tensor::new(vec![r1 - r0, w], out)?,
            Op::Block { x, r0, c0 },
            "block",
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[u32]) -> Result<Var> {
        let n = targets.len().max(1);
        let w = T::one() / T::from_f64(n as f64);
        self.weighted_cross_entropy(logits, targets, &vec![w; targets.len()])
    }

    /// `Σ_t w_t · -log softmax(logits)[t, target_t]`
    pub fn weighted_cross_entropy(
        &self,
        logits: Var,
        targets: &[u32],
        weights: &[T],
    ) -> Result<Var> {
        let (rows, v) = self.dims2(logits, "cross_entropy")?;
        if rows != targets.len() || rows != weights.len() {
            return Err(shape_err(
                "cross_entropy",
                &[rows, v],
                &[targets.len(), weights.len()],
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for r in 0..rows {
            let t = targets[r] as usize;
            if t >= v {
                return Err(domain(alloc::format!("target id {t} out of range {v}")));
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += weights[r] * (lse - row[t]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(domain(alloc::format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let g = g.data();
            let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].grad {
                    return;
                }
                let slot = &mut grads[v.0];
                if slot.is_none() {
                    *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
                }
                f(slot.as_mut().unwrap().data_mut());
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = dims(val(*a));
                    let n = val(*b).shape()[1];
                    acc(*a, &mut |ga| gemm_nt(g, val(*b).data(), ga, m, n, k));
                    acc(*b, &mut |gb| gemm_tn(val(*a).data(), g, gb, m, k, n));
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = dims(val(*a));
                    let n = val(*b).shape()[0];
                    acc(*a, &mut |ga| gemm_nn(g, val(*b).data(), ga, m, n, k));
                    acc(*b, &mut |gb| gemm_tn(g, val(*a).data(), gb, m, n, k));
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(v, &mut |gx| add_into(gx, g));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    acc(*a, &mut |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * vb[j];
                        }
                    });
                    acc(*b, &mut |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * va[j];
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += *c * g[j];
                    }
                }),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    acc(*a, &mut |gx| {
                        for j in 0..gx.len() {
                            if x[j] > T::zero() {
                                gx[j] += g[j];
                            }
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    acc(*x, &mut |gx| {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let idx = |l: usize| (o * len + l) * inner + ii;
                                let dotp: T = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                                for l in 0..len {
                                    gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dotp);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let d = *node.value.shape().last().unwrap();
                    let rows = inv_std.len();
                    let gv = val(*gain).data();
                    acc(*gain, &mut |gg| {
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * normed[r * d + j];
                            }
                        }
                    });
                    acc(*bias, &mut |gb| {
                        for r in 0..rows {
                            for j in 0..d {
                                gb[j] += g[r * d + j];
                            }
                        }
                    });
                    let dt = T::from_f64(d as f64);
                    acc(*x, &mut |gx| {
                        for r in 0..rows {
                            let base = r * d;
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..d {
                                let dn = g[base + j] * gv[j];
                                s1 += dn;
                                s2 += dn * normed[base + j];
                            }
                            let k = inv_std[r] / dt;
                            for j in 0..d {
                                let dn = g[base + j] * gv[j];
                                gx[base + j] += k * (dt * dn - s1 - normed[base + j] * s2);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = val(*table).shape()[1];
                    acc(*table, &mut |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            let id = id as usize;
                            add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let out_shape = node.value.shape();
                    let (outer, total, inner) = axis_split(out_shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        acc(p, &mut |gp| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
                    let w = node.value.shape()[*axis];
                    acc(*x, &mut |gx| {
                        for o in 0..outer {
                            let dst = (o * len + start) * inner;
                            let src = o * w * inner;
                            add_into(&mut gx[dst..dst + w * inner], &g[src..src + w * inner]);
                        }
                    });
                }
                Op::Block { x, r0, c0 } => {
                    let c = val(*x).shape()[1];
                    let (br, bc) = dims(&node.value);
                    acc(*x, &mut |gx| {
                        for i in 0..br {
                            let dst = (r0 + i) * c + c0;
                            add_into(&mut gx[dst..dst + bc], &g[i * bc..(i + 1) * bc]);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
                Op::Sum(x) => {
                    let s = g[0];
                    acc(*x, &mut |gx| {
                        for v in gx.iter_mut() {
                            *v += s;
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let v = val(*logits).shape()[1];
                    let s = g[0];
                    acc(*logits, &mut |gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let w = s * weights[r];
                            for c in 0..v {
                                gl[r * v + c] += w * probs[r * v + c];
                            }
                            gl[r * v + t as usize] -= w;
                        }
                    });
                }
            }
        }
        let params = nodes.iter().map(|n| n.param).collect();
        Ok(Gradients { grads, params })
    }
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Relu(a) | Op::Reshape(a) | Op::Sum(a) => vec![*a],
        Op::Softmax { x, .. } | Op::Slice { x, .. } | Op::Block { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Embedding { table, .. } => vec![*table],
        Op::Concat { parts, .. } => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into `out`, indexed by parameter number.
    /// A parameter entered on the tape several times accumulates all uses.
    pub fn accumulate_params(&self, out: &mut [Tensor<T>]) {
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(p)) = (g, p) {
                out[*p].add_assign(g);
            }
        }
    }
}
