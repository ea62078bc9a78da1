//! Tape-style reverse-mode autodiff.
//!
//! Every op appends a node whose id is larger than the ids of its inputs, so
//! creation order is already a topological order and the backward pass is a
//! single reverse sweep over the node list.

use std::cell::{Ref, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::split_axis;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale {
        a: usize,
        factor: S,
    },
    Relu {
        a: usize,
    },
    Softplus {
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        extents: Vec<usize>,
        inner: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        extent: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    MaxPool {
        a: usize,
        argmax: Vec<usize>,
    },
    SumAxis {
        a: usize,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Sum {
        a: usize,
    },
    Gather {
        a: usize,
        indices: Vec<Option<usize>>,
    },
    Reshape {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<S>,
    },
    CrossEntropy {
        probs: usize,
        target: usize,
        clamped: bool,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records ops on tensors and differentiates a scalar output with respect to
/// every leaf created with `requires_grad`.
///
/// A graph is single-threaded; run independent instances on separate graphs.
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    grads: RefCell<Vec<Option<Vec<S>>>>,
    training: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            training: false,
        }
    }

    pub fn training() -> Self {
        Graph {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Ref<'_, Node<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0])
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Registers a tensor. Its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&self, tensor: Tensor<S>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn param(&self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.node(v), |n| &n.value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.node(v).value.shape().to_vec()
    }

    pub fn data(&self, v: Var) -> Vec<S> {
        self.node(v).value.data().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.node(v).value.data()[0]
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &shape, &[0, 0])),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let out = {
            let av = self.value(a);
            let bv = self.value(b);
            matmul_raw(av.data(), bv.data(), m, k, n)
        };
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            self.needs(&[a, b]),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), rows, cols);
        let t = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(t, Op::Transpose { a: a.0, rows, cols }, self.needs(&[a])))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Vec<S> {
        let av = self.value(a);
        let bv = self.value(b);
        av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let t = Tensor::new(shape, self.zip_with(a, b, |x, y| x + y))?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let t = Tensor::new(shape, self.zip_with(a, b, |x, y| x - y))?;
        Ok(self.push(t, Op::Sub { a: a.0, b: b.0 }, self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let t = Tensor::new(shape, self.zip_with(a, b, |x, y| x * y))?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, self.needs(&[a, b])))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        let d = *sa.last().expect("rank >= 1");
        if sb.iter().product::<usize>() != d {
            return Err(Error::shape("add_bias", &sa, &sb));
        }
        let out = {
            let av = self.value(a);
            let bv = self.value(bias);
            av.data()
                .chunks(d)
                .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &b)| x + b))
                .collect()
        };
        let t = Tensor::new(sa, out)?;
        Ok(self.push(t, Op::AddBias { a: a.0, bias: bias.0 }, self.needs(&[a, bias])))
    }

    pub fn scale(&self, a: Var, factor: S) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale { a: a.0, factor }, self.needs(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(t, Op::Relu { a: a.0 }, self.needs(&[a]))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus { a: a.0 }, self.needs(&[a]))
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis`. Entries whose mask is `false` are excluded and
    /// come out as exact zeros. Uses max-subtraction.
    pub fn softmax_masked(&self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a);
        let (outer, extent, inner) = split_axis(&shape, axis)?;
        let n = outer * extent * inner;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![S::zero(); n];
        {
            let av = self.value(a);
            let x = av.data();
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * extent + i) * inner + r;
                    let max = (0..extent)
                        .filter(|&i| keep(idx(i)))
                        .map(|i| x[idx(i)])
                        .fold(None, |m: Option<S>, v| Some(m.map_or(v, |m| m.max(v))));
                    let Some(max) = max else {
                        return Err(Error::EmptyAxis { op: "softmax" });
                    };
                    let mut total = S::zero();
                    for i in 0..extent {
                        if keep(idx(i)) {
                            let e = (x[idx(i)] - max).exp();
                            out[idx(i)] = e;
                            total += e;
                        }
                    }
                    for i in 0..extent {
                        out[idx(i)] /= total;
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                a: a.0,
                outer,
                extent,
                inner,
            },
            self.needs(&[a]),
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().expect("rank >= 1");
        if d < 2 {
            return Err(Error::DegenerateNormalization);
        }
        for p in [gain, bias] {
            let sp = self.shape(p);
            if sp.iter().product::<usize>() != d {
                return Err(Error::shape("layer_norm", &shape, &sp));
            }
        }
        let eps = S::lit(LAYER_NORM_EPS);
        let dn = S::lit(d as f64);
        let (out, xhat, inv_std) = {
            let xv = self.value(x);
            let gv = self.value(gain);
            let bv = self.value(bias);
            let rows = xv.len() / d;
            let mut xhat = Vec::with_capacity(xv.len());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(d) {
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                let inv = S::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            (out, xhat, inv_std)
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            self.needs(&[x, gain, bias]),
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Internal("concat of zero tensors".into()))?;
        let base = self.shape(*first);
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for (&v, &e) in inputs.iter().zip(&extents) {
                    let data = nodes[v.0].value.data();
                    out.extend_from_slice(&data[o * e * inner..(o + 1) * e * inner]);
                }
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                outer,
                extents,
                inner,
            },
            self.needs(inputs),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        let (outer, extent, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::Index {
                index: start + len,
                len: extent,
            });
        }
        let out = {
            let av = self.value(a);
            let x = av.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
            out
        };
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(
            t,
            Op::Narrow {
                a: a.0,
                outer,
                extent,
                inner,
                start,
                len,
            },
            self.needs(&[a]),
        ))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { a: a.0 }, self.needs(&[a])))
    }

    /// Picks flat elements of `a` into a tensor of `shape`; `None` yields zero.
    pub fn gather(&self, a: Var, indices: Vec<Option<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let out = {
            let av = self.value(a);
            let x = av.data();
            indices
                .iter()
                .map(|i| match *i {
                    Some(i) if i < x.len() => Ok(x[i]),
                    Some(i) => Err(Error::Index { index: i, len: x.len() }),
                    None => Ok(S::zero()),
                })
                .collect::<Result<Vec<_>>>()?
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather { a: a.0, indices }, self.needs(&[a])))
    }

    /// Row gather on a matrix; `None` rows are zero (used for padding).
    pub fn gather_rows(&self, a: Var, rows: &[Option<usize>]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", a)?;
        let mut indices = Vec::with_capacity(rows.len() * d);
        for r in rows {
            match *r {
                Some(r) if r >= n => return Err(Error::Index { index: r, len: n }),
                Some(r) => indices.extend((0..d).map(|j| Some(r * d + j))),
                None => indices.extend(std::iter::repeat_n(None, d)),
            }
        }
        self.gather(a, indices, vec![rows.len(), d])
    }

    // ---- reductions -----------------------------------------------------

    /// Max over `axis`, removing it. Ties route the gradient to the lowest index.
    pub fn max_pool(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        let (outer, extent, inner) = split_axis(&shape, axis)?;
        let (out, argmax) = {
            let av = self.value(a);
            let x = av.data();
            let mut out = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for r in 0..inner {
                    let mut best = (o * extent) * inner + r;
                    for i in 1..extent {
                        let idx = (o * extent + i) * inner + r;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
            (out, argmax)
        };
        let t = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.push(t, Op::MaxPool { a: a.0, argmax }, self.needs(&[a])))
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a);
        let (outer, extent, inner) = split_axis(&shape, axis)?;
        let out = {
            let av = self.value(a);
            let x = av.data();
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..extent {
                    for r in 0..inner {
                        out[o * inner + r] += x[(o * extent + i) * inner + r];
                    }
                }
            }
            out
        };
        let t = Tensor::new(reduced_shape(&shape, axis), out)?;
        Ok(self.push(
            t,
            Op::SumAxis {
                a: a.0,
                outer,
                extent,
                inner,
            },
            self.needs(&[a]),
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, self.needs(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    // ---- stochastic -----------------------------------------------------

    /// Inverted dropout with an explicit seed. Identity outside training or
    /// at rate zero.
    pub fn dropout(&self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = S::lit(1.0 / (1.0 - rate));
        let (t, mask) = {
            let av = self.value(a);
            let mask: Vec<S> = (0..av.len())
                .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
                .collect();
            let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::new(av.shape().to_vec(), data)?, mask)
        };
        Ok(self.push(t, Op::Dropout { a: a.0, mask }, self.needs(&[a])))
    }

    // ---- losses ---------------------------------------------------------

    /// `-log(probs[target])`, with the probability clamped at [`LOG_CLAMP`].
    pub fn cross_entropy(&self, probs: Var, target: usize) -> Result<Var> {
        let (value, clamped) = {
            let pv = self.value(probs);
            let p = pv.data();
            if target >= p.len() {
                return Err(Error::Index {
                    index: target,
                    len: p.len(),
                });
            }
            let sum: S = p.iter().copied().sum();
            if (sum - S::one()).abs() > S::dist_tolerance() || p.iter().any(|&v| v < S::zero()) {
                return Err(Error::NotADistribution { sum: sum.as_f64() });
            }
            let floor = S::lit(LOG_CLAMP);
            let clamped = p[target] < floor;
            (-(p[target].max(floor)).ln(), clamped)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                probs: probs.0,
                target,
                clamped,
            },
            self.needs(&[probs]),
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagates from a single-element output. Afterwards every leaf with
    /// `requires_grad` holds a gradient (zeros if the output does not depend
    /// on it).
    pub fn backward(&self, output: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[output.0].value.len() != 1 {
            return Err(Error::shape("backward", nodes[output.0].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![S::one()]);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        for (id, node) in nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[id].clone().unwrap_or_else(|| vec![S::zero(); node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.clone()?;
        Tensor::new(self.shape(v), g).ok()
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            for (cj, &bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = grads[id].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}

fn propagate<S: Scalar>(nodes: &[Node<S>], id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let wants = |i: usize| nodes[i].needs_grad;
    let val = |i: usize| nodes[i].value.data();
    let len = |i: usize| nodes[i].value.len();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if wants(a) {
                // dA = dC · Bᵀ
                let bt = transpose_raw(val(b), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                accumulate(grads, a, m * k, |s| add_into(s, &da));
            }
            if wants(b) {
                // dB = Aᵀ · dC
                let at = transpose_raw(val(a), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(grads, b, k * n, |s| add_into(s, &db));
            }
        }
        &Op::Transpose { a, rows, cols } => {
            let da = transpose_raw(g, cols, rows);
            accumulate(grads, a, rows * cols, |s| add_into(s, &da));
        }
        &Op::Add { a, b } => {
            for x in [a, b] {
                if wants(x) {
                    accumulate(grads, x, g.len(), |s| add_into(s, g));
                }
            }
        }
        &Op::Sub { a, b } => {
            if wants(a) {
                accumulate(grads, a, g.len(), |s| add_into(s, g));
            }
            if wants(b) {
                accumulate(grads, b, g.len(), |s| {
                    for (si, &gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                });
            }
        }
        &Op::Mul { a, b } => {
            if wants(a) {
                let vb = val(b);
                accumulate(grads, a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
            }
            if wants(b) {
                let va = val(a);
                accumulate(grads, b, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
        }
        &Op::AddBias { a, bias } => {
            if wants(a) {
                accumulate(grads, a, g.len(), |s| add_into(s, g));
            }
            if wants(bias) {
                let d = len(bias);
                accumulate(grads, bias, d, |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
        }
        &Op::Scale { a, factor } => {
            accumulate(grads, a, g.len(), |s| {
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si += gi * factor;
                }
            });
        }
        &Op::Relu { a } => {
            let x = val(a);
            accumulate(grads, a, g.len(), |s| {
                for i in 0..g.len() {
                    if x[i] > S::zero() {
                        s[i] += g[i];
                    }
                }
            });
        }
        &Op::Softplus { a } => {
            let x = val(a);
            accumulate(grads, a, g.len(), |s| {
                for i in 0..g.len() {
                    let sig = S::one() / (S::one() + (-x[i]).exp());
                    s[i] += g[i] * sig;
                }
            });
        }
        &Op::Softmax {
            a,
            outer,
            extent,
            inner,
        } => {
            let y = nodes[id].value.data();
            accumulate(grads, a, g.len(), |s| {
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * extent + i) * inner + r;
                        let dot: S = (0..extent).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..extent {
                            s[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let d = len(gain);
            let gv = val(gain);
            if wants(x) {
                let dn = S::lit(d as f64);
                accumulate(grads, x, g.len(), |s| {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let rows = r * d..(r + 1) * d;
                        let dxhat: Vec<S> = g[rows.clone()].iter().zip(gv).map(|(&gi, &w)| gi * w).collect();
                        let xh = &xhat[rows.clone()];
                        let sum_d: S = dxhat.iter().copied().sum();
                        let sum_dx: S = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            s[r * d + j] += inv / dn * (dn * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
            }
            if wants(gain) {
                accumulate(grads, gain, d, |s| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                });
            }
            if wants(bias) {
                accumulate(grads, bias, d, |s| {
                    for gr in g.chunks(d) {
                        add_into(s, gr);
                    }
                });
            }
        }
        Op::Concat {
            inputs,
            outer,
            extents,
            inner,
        } => {
            let total: usize = extents.iter().sum();
            let mut offset = 0;
            for (&v, &e) in inputs.iter().zip(extents) {
                if wants(v) {
                    accumulate(grads, v, outer * e * inner, |s| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut s[o * e * inner..(o + 1) * e * inner], &g[src..src + e * inner]);
                        }
                    });
                }
                offset += e;
            }
        }
        &Op::Narrow {
            a,
            outer,
            extent,
            inner,
            start,
            len: l,
        } => {
            accumulate(grads, a, outer * extent * inner, |s| {
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    add_into(&mut s[dst..dst + l * inner], &g[o * l * inner..(o + 1) * l * inner]);
                }
            });
        }
        Op::MaxPool { a, argmax } => {
            accumulate(grads, *a, len(*a), |s| {
                for (&src, &gi) in argmax.iter().zip(g) {
                    s[src] += gi;
                }
            });
        }
        &Op::SumAxis {
            a,
            outer,
            extent,
            inner,
        } => {
            accumulate(grads, a, outer * extent * inner, |s| {
                for o in 0..outer {
                    for i in 0..extent {
                        for r in 0..inner {
                            s[(o * extent + i) * inner + r] += g[o * inner + r];
                        }
                    }
                }
            });
        }
        &Op::Sum { a } => {
            accumulate(grads, a, len(a), |s| {
                for si in s.iter_mut() {
                    *si += g[0];
                }
            });
        }
        Op::Gather { a, indices } => {
            accumulate(grads, *a, len(*a), |s| {
                for (i, &gi) in indices.iter().zip(g) {
                    if let Some(i) = *i {
                        s[i] += gi;
                    }
                }
            });
        }
        &Op::Reshape { a } => {
            accumulate(grads, a, g.len(), |s| add_into(s, g));
        }
        Op::Dropout { a, mask } => {
            accumulate(grads, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * mask[i];
                }
            });
        }
        &Op::CrossEntropy { probs, target, clamped } => {
            if !clamped {
                let p = val(probs)[target];
                accumulate(grads, probs, len(probs), |s| s[target] -= g[0] / p);
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
