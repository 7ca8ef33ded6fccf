//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so creation order is a topological order and
//! [`Tape::backward`] simply walks it in reverse. Leaf gradients accumulate
//! across calls until [`Tape::zero_grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization layers switch between batch statistics and running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Relu(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    AvgPool(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`: nothing flowing into the result reaches `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Matrix product of `[M,K]×[K,P]`, or batched `[B,M,K]×[B,K,P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (batch, m, k, p) = dims;
        let mut out = vec![T::zero(); batch * m * p];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            mm_acc(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * p..(bi + 1) * k * p],
                &mut out[bi * m * p..(bi + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let shape = if sa.len() == 2 { vec![m, p] } else { vec![batch, m, p] };
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (batch, m, n) = match *shape.as_slice() {
            [m, n] => (1, m, n),
            [b, m, n] => (b, m, n),
            _ => {
                return Err(Error::Rank {
                    op: "transpose",
                    expected: 2,
                    shape,
                })
            }
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        transpose_into(src, &mut out, batch, m, n);
        let mut new_shape = shape.clone();
        let r = new_shape.len();
        new_shape.swap(r - 1, r - 2);
        let value = Tensor::new(&new_shape, out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `out.flat[i] = a.flat[index[i]]`. Backward scatters with accumulation.
    pub fn gather(&mut self, a: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        if index.len() != numel(shape) {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                got: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Gather(a, index), rg))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for_each_lane(x.shape(), axis, |lane| softmax_lane(&mut out, lane));
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for_each_lane(x.shape(), axis, |lane| {
            let max = lane.clone().map(|i| out[i]).fold(T::neg_infinity(), T::max);
            let lse = max + lane.clone().map(|i| (out[i] - max).exp()).sum::<T>().ln();
            for i in lane {
                out[i] = out[i] - lse;
            }
        });
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::LogSoftmax(a, axis), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.needs(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Elementwise square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        let rg = self.needs(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of_usize(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(a);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    /// Direct 2-D convolution. `x` is `[B,H,W,Cin]` (or `[H,W,Cin]`), `kernel`
    /// is `[k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let g = conv_geometry(&xs, &ks, stride, padding)?;
        let mut out = vec![T::zero(); g.batch * g.ho * g.wo * g.cout];
        conv_forward(self.value(x).data(), self.value(kernel).data(), &mut out, &g);
        let shape = if xs.len() == 3 {
            vec![g.ho, g.wo, g.cout]
        } else {
            vec![g.batch, g.ho, g.wo, g.cout]
        };
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization over every axis except the last.
    ///
    /// In [`Mode::Train`] batch statistics are used and the running buffers are
    /// updated in place; in [`Mode::Eval`] the running buffers are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Rank {
            op: "batch_norm",
            expected: 2,
            shape: shape.clone(),
        })?;
        for (v, name) in [(scale, "scale"), (shift, "shift")] {
            if self.shape(v) != [c] {
                return Err(Error::invalid(format!(
                    "batch_norm {name} has shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid("batch_norm running statistics length"));
        }
        let src = self.value(x).data();
        let m = src.len() / c;
        if m == 0 {
            return Err(Error::invalid("batch_norm on an empty batch"));
        }
        let eps = T::of(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                for row in src.chunks_exact(c) {
                    for (acc, &v) in mean.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                let mf = T::of_usize(m);
                mean.iter_mut().for_each(|v| *v = *v / mf);
                let mut var = vec![T::zero(); c];
                for row in src.chunks_exact(c) {
                    for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc = *acc + (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / mf);
                let momentum = T::of(BN_MOMENTUM);
                let unbias = if m > 1 { mf / T::of_usize(m - 1) } else { T::one() };
                for ch in 0..c {
                    running_mean[ch] = (T::one() - momentum) * running_mean[ch] + momentum * mean[ch];
                    running_var[ch] =
                        (T::one() - momentum) * running_var[ch] + momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for (idx, &v) in src.iter().enumerate() {
            let ch = idx % c;
            let nh = (v - mean[ch]) * inv_std[ch];
            xhat[idx] = nh;
            out[idx] = sc[ch] * nh + sh[ch];
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Non-overlapping average pooling with window and stride `k` on
    /// `[B,H,W,C]` or `[H,W,C]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, h, w, c) = bhwc(&shape, "avg_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::invalid(format!(
                "pooling kernel {k} does not divide spatial extent {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * ho * wo * c];
        let norm = T::one() / T::of_usize(k * k);
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let s = ((bi * h + y) * w + xx) * c;
                    let o = ((bi * ho + y / k) * wo + xx / k) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] + src[s + ch];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * norm);
        let out_shape = if shape.len() == 3 {
            vec![ho, wo, c]
        } else {
            vec![b, ho, wo, c]
        };
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::AvgPool(x, k), rg))
    }

    /// Populates gradients of every gradient-requiring leaf reachable from
    /// `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, &d) in acc.data_mut().iter_mut().zip(&g) {
                        *a = *a + d;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(vb) {
                        *x = *x + gy * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(va) {
                        *x = *x + gy * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *s)
            }),
            Op::AddBias(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                let c = nodes[bias.0].value.len();
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (batch, m, k, p) = matmul_dims(sa, sb).expect("checked in forward");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for bi in 0..batch {
                        mm_bt_acc(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &vb[bi * k * p..(bi + 1) * k * p],
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for bi in 0..batch {
                        mm_at_acc(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut d[bi * k * p..(bi + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                });
            }
            Op::Transpose(a) => {
                // the output is [.., n, m]; transposing g back restores [.., m, n]
                let s = node.value.shape();
                let r = s.len();
                let (batch, n, m) = if r == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                acc(*a, &mut |d| {
                    let mut t = vec![T::zero(); g.len()];
                    transpose_into(g, &mut t, batch, n, m);
                    add_into(d, &t);
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Gather(a, index) => acc(*a, &mut |d| {
                for (&src, &gy) in index.iter().zip(g) {
                    d[src] = d[src] + gy;
                }
            }),
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for_each_lane(node.value.shape(), *axis, |lane| {
                        let dot: T = lane.clone().map(|i| g[i] * y[i]).sum();
                        for i in lane {
                            d[i] = d[i] + y[i] * (g[i] - dot);
                        }
                    })
                });
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for_each_lane(node.value.shape(), *axis, |lane| {
                        let gs: T = lane.clone().map(|i| g[i]).sum();
                        for i in lane {
                            d[i] = d[i] + g[i] - y[i].exp() * gs;
                        }
                    })
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for ((o, &gy), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *o = *o + gy;
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for ((o, &gy), &yv) in d.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *o = *o + gy / (yv + yv);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for ii in 0..inner {
                                d[base + ii] = d[base + ii] + g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let geo = conv_geometry(
                    nodes[x.0].value.shape(),
                    nodes[kernel.0].value.shape(),
                    *stride,
                    *padding,
                )
                .expect("checked in forward");
                let (vx, vk) = (val(*x), val(*kernel));
                acc(*x, &mut |d| conv_backward_input(g, vk, d, &geo));
                acc(*kernel, &mut |d| conv_backward_kernel(g, vx, d, &geo));
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let sc = val(*scale);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (idx, (&gy, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = idx % c;
                    sum_g[ch] = sum_g[ch] + gy;
                    sum_gx[ch] = sum_gx[ch] + gy * xh;
                }
                acc(*scale, &mut |d| add_into(d, &sum_gx));
                acc(*shift, &mut |d| add_into(d, &sum_g));
                acc(*x, &mut |d| {
                    let mf = T::of_usize(m);
                    for (idx, (&gy, &xh)) in g.iter().zip(xhat).enumerate() {
                        let ch = idx % c;
                        let k = sc[ch] * inv_std[ch];
                        let dx = if *batch_stats {
                            k * (gy - sum_g[ch] / mf - xh * sum_gx[ch] / mf)
                        } else {
                            k * gy
                        };
                        d[idx] = d[idx] + dx;
                    }
                });
            }
            Op::AvgPool(x, k) => {
                let (b, h, w, c) = bhwc(nodes[x.0].value.shape(), "avg_pool2d").expect("checked");
                let (ho, wo) = (h / k, w / k);
                let norm = T::one() / T::of_usize(k * k);
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let s = ((bi * h + y) * w + xx) * c;
                                let o = ((bi * ho + y / k) * wo + xx / k) * c;
                                for ch in 0..c {
                                    d[s + ch] = d[s + ch] + g[o + ch] * norm;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, p]) if k == k2 => Some((1, *m, *k, *p)),
        ([b, m, k], [b2, k2, p]) if b == b2 && k == k2 => Some((*b, *m, *k, *p)),
        _ => None,
    }
}


/// `out[M,P] += a[M,K] · b[K,P]`
fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    gemm_nn(a, b, out, m, k, p);
}

/// `out[M,K] += g[M,P] · b[K,P]ᵀ`
fn mm_bt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, p: usize, k: usize) {
    let mut bt = vec![T::zero(); k * p];
    transpose_into(b, &mut bt, 1, k, p);
    gemm_nn(g, &bt, out, m, p, k);
}

/// `out[K,P] += a[M,K]ᵀ · g[M,P]`
fn mm_at_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    let mut at = vec![T::zero(); m * k];
    transpose_into(a, &mut at, 1, m, k);
    gemm_nn(&at, g, out, k, m, p);
}

/// `out[M,N] += a[M,K] · b[K,N]`, all row-major. Rows of `a` are packed
/// four at a time so that a 4×8 block of accumulators stays in registers.
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    const R: usize = 4;
    const L: usize = 8;
    if k == 0 || n == 0 {
        return;
    }
    let b = &b[..k * n];
    let n_full = n - n % L;
    let m_full = m - m % R;
    let mut pack = vec![T::zero(); k * R];
    for i in (0..m_full).step_by(R) {
        for r in 0..R {
            for (kk, &v) in a[(i + r) * k..(i + r + 1) * k].iter().enumerate() {
                pack[kk * R + r] = v;
            }
        }
        for j in (0..n_full).step_by(L) {
            let mut acc = [[T::zero(); L]; R];
            for (ap, brow) in pack.chunks_exact(R).zip(b.chunks_exact(n)) {
                let bv: &[T; L] = brow[j..j + L].try_into().expect("lane");
                let ap: &[T; R] = ap.try_into().expect("pack");
                for r in 0..R {
                    for l in 0..L {
                        acc[r][l] = acc[r][l] + ap[r] * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o: &mut [T; L] = (&mut out[(i + r) * n + j..(i + r) * n + j + L]).try_into().expect("lane");
                for l in 0..L {
                    o[l] = o[l] + row[l];
                }
            }
        }
        for r in 0..R {
            gemm_tail(a, b, out, i + r, k, n, n_full);
        }
    }
    for i in m_full..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in (0..n_full).step_by(L) {
            let mut acc = [T::zero(); L];
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                let bv: &[T; L] = brow[j..j + L].try_into().expect("lane");
                for l in 0..L {
                    acc[l] = acc[l] + av * bv[l];
                }
            }
            let o = &mut out[i * n + j..i * n + j + L];
            for l in 0..L {
                o[l] = o[l] + acc[l];
            }
        }
        gemm_tail(a, b, out, i, k, n, n_full);
    }
}

/// Columns `from..n` of row `i` of [`gemm_nn`].
fn gemm_tail<T: Real>(a: &[T], b: &[T], out: &mut [T], i: usize, k: usize, n: usize, from: usize) {
    for j in from..n {
        let mut acc = T::zero();
        for kk in 0..k {
            acc = acc + a[i * k + kk] * b[kk * n + j];
        }
        out[i * n + j] = out[i * n + j] + acc;
    }
}

fn transpose_into<T: Real>(src: &[T], dst: &mut [T], batch: usize, m: usize, n: usize) {
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                dst[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Calls `f` once per 1-D lane along `axis` with the lane's flat indices.
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(core::iter::StepBy<core::ops::Range<usize>>),
) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn softmax_lane<T: Real>(buf: &mut [T], lane: core::iter::StepBy<core::ops::Range<usize>>) {
    let max = lane.clone().map(|i| buf[i]).fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for i in lane.clone() {
        let e = (buf[i] - max).exp();
        buf[i] = e;
        total = total + e;
    }
    for i in lane {
        buf[i] = buf[i] / total;
    }
}

fn bhwc(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Rank {
            op,
            expected: 4,
            shape: shape.to_vec(),
        }),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (batch, h, w, cin) = bhwc(xs, "conv2d")?;
    let [kh, kw, kcin, cout] = *ks else {
        return Err(Error::Rank {
            op: "conv2d kernel",
            expected: 4,
            shape: ks.to_vec(),
        });
    };
    if kh != kw || kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvGeometry {
        batch,
        h,
        w,
        cin,
        k: kh,
        cout,
        stride,
        padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Visits every (output pixel, kernel tap, input pixel) triple that lies
/// inside the unpadded input.
/// Patch matrix of image `b`: row `oy·wo + ox`, column `tap·cin + ci`,
/// zero where the tap falls in the padding.
fn im2col<T: Real>(x: &[T], b: usize, g: &ConvGeometry, cols: &mut [T]) {
    let kk = g.k * g.k * g.cin;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto image `b` of `dx`.
fn col2im<T: Real>(cols: &[T], b: usize, g: &ConvGeometry, dx: &mut [T]) {
    let kk = g.k * g.k * g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    add_into(&mut dx[dst..dst + g.cin], &row[src..src + g.cin]);
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &[T], k: &[T], out: &mut [T], g: &ConvGeometry) {
    let (m, kk) = (g.ho * g.wo, g.k * g.k * g.cin);
    let mut cols = vec![T::zero(); m * kk];
    for b in 0..g.batch {
        im2col(x, b, g, &mut cols);
        gemm_nn(&cols, k, &mut out[b * m * g.cout..(b + 1) * m * g.cout], m, kk, g.cout);
    }
}

fn conv_backward_input<T: Real>(gout: &[T], k: &[T], dx: &mut [T], g: &ConvGeometry) {
    let (m, kk) = (g.ho * g.wo, g.k * g.k * g.cin);
    let mut kt = vec![T::zero(); kk * g.cout];
    transpose_into(k, &mut kt, 1, kk, g.cout);
    let mut dcols = vec![T::zero(); m * kk];
    for b in 0..g.batch {
        dcols.iter_mut().for_each(|v| *v = T::zero());
        gemm_nn(&gout[b * m * g.cout..(b + 1) * m * g.cout], &kt, &mut dcols, m, g.cout, kk);
        col2im(&dcols, b, g, dx);
    }
}

fn conv_backward_kernel<T: Real>(gout: &[T], x: &[T], dk: &mut [T], g: &ConvGeometry) {
    let (m, kk) = (g.ho * g.wo, g.k * g.k * g.cin);
    let mut cols = vec![T::zero(); m * kk];
    let mut cols_t = vec![T::zero(); m * kk];
    for b in 0..g.batch {
        im2col(x, b, g, &mut cols);
        transpose_into(&cols, &mut cols_t, 1, m, kk);
        gemm_nn(&cols_t, &gout[b * m * g.cout..(b + 1) * m * g.cout], dk, kk, m, g.cout);
    }
}
