//! Reverse-mode differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted and backward is one reverse sweep. Parameters
//! are borrowed from a [`ParameterStore`] rather than copied; backward returns
//! a [`Gradients`] value so several tapes can share one store concurrently.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::gemm;
use super::{Array, Gradients, NumericsError, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddBcast { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, c: Rc<Array> },
    Affine { a: Var, scale: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    SumAll { a: Var },
    MeanAxis { a: Var, axis: usize },
    NormLast { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::AddBcast { .. } => "add_broadcast",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Concat { .. } => "concat",
            Op::SumAll { .. } => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::NormLast { .. } => "norm",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Where the first non-finite value appeared on a tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    rng: ChaCha8Rng,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let inner = shape.last().copied().unwrap_or(1);
    let outer = if inner == 0 { 0 } else { shape.iter().product::<usize>() / inner };
    (outer, inner)
}

fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore, training: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference tape: no dropout, deterministic.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.value(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Array::zeros(&[0]), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// First node holding a NaN or infinity, in execution order.
    pub fn first_non_finite(&self) -> Option<NonFinite> {
        (0..self.nodes.len()).find_map(|i| {
            (!self.value(Var(i)).is_finite()).then(|| NonFinite {
                node: i,
                op: self.nodes[i].op.name(),
            })
        })
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                found: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        if bsh.len() != 2 || ash.is_empty() || *ash.last().unwrap() != bsh[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                expected: ash.to_vec(),
                found: bsh.to_vec(),
            });
        }
        let (m, k) = split_last(ash);
        let n = bsh[1];
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::from_vec(&out_shape, out)?, Op::MatMul { a, b }, ng))
    }

    /// Batched `op(a) · op(b)` over all leading axes; `ta`/`tb` transpose the
    /// trailing two axes of the corresponding operand.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumericsError> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let bad = || NumericsError::ShapeMismatch {
            op: "batch_matmul",
            expected: ash.clone(),
            found: bsh.clone(),
        };
        if ash.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(bad());
        }
        let r = ash.len();
        let (m, k) = if ta { (ash[r - 1], ash[r - 2]) } else { (ash[r - 2], ash[r - 1]) };
        let (k2, n) = if tb { (bsh[r - 1], bsh[r - 2]) } else { (bsh[r - 2], bsh[r - 1]) };
        if k != k2 {
            return Err(bad());
        }
        let batch: usize = ash[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut out_shape = ash[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::from_vec(&out_shape, out)?, Op::BatchMatMul { a, b, ta, tb }, ng))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_vec(av.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_same("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(NumericsError::ShapeMismatch {
                op: "add_broadcast",
                expected: ash.to_vec(),
                found: bsh.to_vec(),
            });
        }
        let inner = self.value(b).numel();
        let bd = self.value(b).data();
        let av = self.value(a);
        let mut data = av.data().to_vec();
        if inner > 0 {
            for row in data.chunks_mut(inner) {
                for (x, y) in row.iter_mut().zip(bd) {
                    *x += y;
                }
            }
        }
        let v = Array::from_vec(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::AddBcast { a, b }, ng))
    }

    /// Elementwise product with a non-differentiable array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Rc<Array>) -> Result<Var, NumericsError> {
        if self.shape(a) != c.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_const",
                expected: self.shape(a).to_vec(),
                found: c.shape().to_vec(),
            });
        }
        let av = self.value(a);
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Array::from_vec(av.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MulConst { a, c }, ng))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(v, Op::Affine { a, scale }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(v, Op::Relu { a }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid { a }, ng)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(NumericsError::EmptyShape("layer_norm"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                expected: vec![d],
                found: self.shape(gamma).to_vec(),
            });
        }
        let (rows, _) = split_last(&xs);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + bt[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Array::from_vec(&xs, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        ))
    }

    /// Softmax over the last axis. `mask` (same element count, `true` = keep)
    /// removes entries; a row with nothing kept outputs zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.numel() {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax",
                    expected: av.shape().to_vec(),
                    found: vec![m.len()],
                });
            }
        }
        let (rows, d) = split_last(av.shape());
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let keep = |c: usize| mask.is_none_or(|m| m[r * d + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..d {
                if keep(c) && x[r * d + c] > max {
                    max = x[r * d + c];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in 0..d {
                if keep(c) {
                    let e = (x[r * d + c] - max).exp();
                    out[r * d + c] = e;
                    total += e;
                }
            }
            for c in 0..d {
                out[r * d + c] /= total;
            }
        }
        let v = Array::from_vec(av.shape(), out)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Softmax { a }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape { a }, ng))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let nd = self.shape(a).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&x| x >= nd || std::mem::replace(&mut seen[x], true)) {
            return Err(NumericsError::InvalidAxis { op: "permute", axis: axes.len(), ndim: nd });
        }
        let v = self.value(a).permuted(axes);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Permute { a, axes: axes.to_vec() }, ng))
    }

    /// Gathers `indices` along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var, NumericsError> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() {
            return Err(NumericsError::InvalidAxis { op: "index_select", axis, ndim: sh.len() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sh[axis]) {
            return Err(NumericsError::IndexOutOfRange { op: "index_select", index: bad, len: sh[axis] });
        }
        let (outer, len, inner) = around_axis(&sh, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                out.extend_from_slice(&x[s..s + inner]);
            }
        }
        let mut out_shape = sh;
        out_shape[axis] = indices.len();
        let ng = self.ng(a);
        Ok(self.push(
            Array::from_vec(&out_shape, out)?,
            Op::IndexSelect { a, axis, indices: indices.to_vec() },
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var, NumericsError> {
        let idx: Vec<usize> = range.collect();
        self.index_select(a, axis, &idx)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = self.shape(*parts.first().ok_or(NumericsError::EmptyShape("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(NumericsError::InvalidAxis { op: "concat", axis, ndim: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    expected: first.clone(),
                    found: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let x = self.value(p).data();
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Array::from_vec(&out_shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll { a }, ng)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() || sh[axis] == 0 {
            return Err(NumericsError::InvalidAxis { op: "mean_axis", axis, ndim: sh.len() });
        }
        let (outer, len, inner) = around_axis(&sh, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let s = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[s + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = sh;
        out_shape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(Array::from_vec(&out_shape, out)?, Op::MeanAxis { a, axis }, ng))
    }

    /// Euclidean norm over the last axis.
    pub fn norm_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let sh = self.shape(a).to_vec();
        let (rows, d) = split_last(&sh);
        if sh.is_empty() {
            return Err(NumericsError::EmptyShape("norm_last"));
        }
        let x = self.value(a).data();
        let out: Vec<f64> = (0..rows)
            .map(|r| x[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Array::from_vec(&sh[..sh.len() - 1], out)?, Op::NormLast { a }, ng))
    }

    /// Inverted dropout: identity at inference or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidRate(rate));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Rc::new(Array::from_vec(&shape, data)?);
        self.mul_const(a, mask)
    }

    /// Reverse sweep from a scalar `loss`. Parameters not reached get `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: Array, grads: &mut [Option<Array>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                acc(&mut out.grads[id.0], g);
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = split_last(av.shape());
                let n = bv.shape()[1];
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    acc_vec(grads, *a, av.shape(), da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    acc_vec(grads, *b, bv.shape(), db);
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let r = av.ndim();
                let ash = av.shape();
                let (m, k) = if *ta { (ash[r - 1], ash[r - 2]) } else { (ash[r - 2], ash[r - 1]) };
                let n = node.value.shape()[r - 1];
                let batch: usize = ash[..r - 2].iter().product();
                if self.ng(*a) {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        let ds = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *ta {
                            // dA (k×m) = op(B) · dCᵀ
                            gemm(k, n, m, bs, *tb, gs, true, ds, false);
                        } else {
                            // dA (m×k) = dC · op(B)ᵀ
                            gemm(m, n, k, gs, false, bs, !*tb, ds, false);
                        }
                    }
                    acc_vec(grads, *a, av.shape(), da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let ds = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *tb {
                            // dB (n×k) = dCᵀ · op(A)
                            gemm(n, m, k, gs, true, as_, *ta, ds, false);
                        } else {
                            // dB (k×n) = op(A)ᵀ · dC
                            gemm(k, m, n, as_, !*ta, gs, false, ds, false);
                        }
                    }
                    acc_vec(grads, *b, bv.shape(), db);
                }
            }
            Op::Add { a, b } => {
                if self.ng(*a) {
                    acc_var(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    acc_var(grads, *b, g);
                }
            }
            Op::AddBcast { a, b } => {
                if self.ng(*b) {
                    let bv = self.value(*b);
                    let inner = bv.numel();
                    let mut db = vec![0.0; inner];
                    if inner > 0 {
                        for row in gd.chunks(inner) {
                            for (x, y) in db.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    }
                    acc_vec(grads, *b, bv.shape(), db);
                }
                if self.ng(*a) {
                    acc_var(grads, *a, g);
                }
            }
            Op::Sub { a, b } => {
                if self.ng(*b) {
                    acc_var(grads, *b, g.map(|x| -x));
                }
                if self.ng(*a) {
                    acc_var(grads, *a, g);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    acc_vec(grads, *a, av.shape(), d);
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc_vec(grads, *b, bv.shape(), d);
                }
            }
            Op::MulConst { a, c } => {
                let d = gd.iter().zip(c.data()).map(|(x, y)| x * y).collect();
                acc_vec(grads, *a, c.shape(), d);
            }
            Op::Affine { a, scale } => {
                acc_var(grads, *a, g.map(|x| x * scale));
            }
            Op::Relu { a } => {
                let av = self.value(*a);
                let d = gd.iter().zip(av.data()).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect();
                acc_vec(grads, *a, av.shape(), d);
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(x, s)| x * s * (1.0 - s)).collect();
                acc_vec(grads, *a, node.value.shape(), d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let shape = node.value.shape();
                let (rows, d) = split_last(shape);
                let gm = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += gd[r * d + c] * xhat[r * d + c];
                            db[c] += gd[r * d + c];
                        }
                    }
                    if self.ng(*gamma) {
                        acc_vec(grads, *gamma, &[d], dg);
                    }
                    if self.ng(*beta) {
                        acc_vec(grads, *beta, &[d], db);
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gd[r * d + c] * gm[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gd[r * d + c] * gm[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                    acc_vec(grads, *x, shape, dx);
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let (rows, d) = split_last(node.value.shape());
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * d;
                    let dot: f64 = (0..d).map(|c| y[s + c] * gd[s + c]).sum();
                    for c in 0..d {
                        dx[s + c] = y[s + c] * (gd[s + c] - dot);
                    }
                }
                acc_vec(grads, *a, node.value.shape(), dx);
            }
            Op::Reshape { a } => {
                let sh = self.shape(*a).to_vec();
                acc_var(grads, *a, g.reshaped(&sh).expect("reshape preserves size"));
            }
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc_var(grads, *a, g.permuted(&inv));
            }
            Op::IndexSelect { a, axis, indices } => {
                let sh = self.shape(*a);
                let (outer, len, inner) = around_axis(sh, *axis);
                let mut dx = vec![0.0; sh.iter().product()];
                for o in 0..outer {
                    for (k, &ix) in indices.iter().enumerate() {
                        let src = (o * indices.len() + k) * inner;
                        let dst = (o * len + ix) * inner;
                        for t in 0..inner {
                            dx[dst + t] += gd[src + t];
                        }
                    }
                }
                acc_vec(grads, *a, sh, dx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = around_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let psh = self.shape(p);
                    let len = psh[*axis];
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        acc_vec(grads, p, psh, dp);
                    }
                    offset += len;
                }
            }
            Op::SumAll { a } => {
                let sh = self.shape(*a);
                acc_var(grads, *a, Array::full(sh, gd[0]));
            }
            Op::MeanAxis { a, axis } => {
                let sh = self.shape(*a);
                let (outer, len, inner) = around_axis(sh, *axis);
                let inv = 1.0 / len as f64;
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for t in 0..inner {
                            dx[(o * len + l) * inner + t] = gd[o * inner + t] * inv;
                        }
                    }
                }
                acc_vec(grads, *a, sh, dx);
            }
            Op::NormLast { a } => {
                let av = self.value(*a);
                let (rows, d) = split_last(av.shape());
                let norms = node.value.data();
                let x = av.data();
                let mut dx = vec![0.0; x.len()];
                for r in 0..rows {
                    if norms[r] > 0.0 {
                        let f = gd[r] / norms[r];
                        for c in 0..d {
                            dx[r * d + c] = f * x[r * d + c];
                        }
                    }
                }
                acc_vec(grads, *a, av.shape(), dx);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc(slot: &mut Option<Array>, g: Array) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn acc_var(grads: &mut [Option<Array>], v: Var, g: Array) {
    acc(&mut grads[v.0], g);
}

fn acc_vec(grads: &mut [Option<Array>], v: Var, shape: &[usize], data: Vec<f64>) {
    acc(&mut grads[v.0], Array::from_vec(shape, data).expect("gradient shape"));
}
