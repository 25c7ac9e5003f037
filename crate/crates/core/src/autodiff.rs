//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; since inputs
//! must already exist on the tape, node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep. Leaf gradients persist
//! across sweeps and accumulate until [`Tape::zero_grad`]. A tape is meant
//! to live for one training step.

use crate::conv::{batch_to_channel_major, channel_to_batch_major, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom, xmat: Vec<T> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same values as `x`, severed from the graph.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a length-`n` vector to every length-`n` row of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        let n = bs.iter().product::<usize>();
        if bs.len() != 1 || xs.last() != Some(&n) {
            return Err(Error::shape("add_row_bias", &[xs, bs]));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(v, &c)| *v += c);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRowBias(x, b), rg))
    }

    /// `(m x k) @ (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape("matmul", &[sa, sb]));
        };
        if k != k2 {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Rectifier with derivative 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&c) = t.shape().last() else {
            return Err(Error::shape("softmax", &[t.shape()]));
        };
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Mean softmax cross-entropy of `B x C` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let &[b, c] = t.shape() else {
            return Err(Error::shape("cross_entropy", &[t.shape()]));
        };
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", &[t.shape(), &[labels.len()]]));
        }
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            total += log_sum_exp(t.row(i)) - t.row(i)[y];
        }
        let value = Tensor::scalar(total / T::lit(b as f64));
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    /// 2-D convolution of `N x C x H x W` input with `O x C x k x k` weight
    /// and per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[_, c, _, _], &[o, c2, k, k2], &[o2]) = (xs, ws, bs) else {
            return Err(Error::shape("conv2d", &[xs, ws, bs]));
        };
        if c != c2 || k != k2 || o != o2 {
            return Err(Error::shape("conv2d", &[xs, ws, bs]));
        }
        let geom = ConvGeom::new(xs, k, stride, pad)?;
        let cols = geom.im2col(self.value(x).data());
        let p = geom.positions();
        let np = geom.batch * p;
        let mut mat = vec![T::zero(); o * np];
        T::gemm(false, false, o, geom.patch_len(), np, self.value(w).data(), &cols, &mut mat, false);
        let bias = self.value(b).data();
        for (ch, row) in mat.chunks_mut(np).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[ch]);
        }
        let out = channel_to_batch_major(&mat, geom.batch, o, p);
        let shape = [geom.batch, o, geom.out_height(), geom.out_width()];
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`] in `x`).
    /// Input `N x C_in x H x W`, weight `C_in x C_out x k x k`, bias `C_out`;
    /// output extent `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[n, cin, h, wd], &[cin2, cout, k, k2], &[cout2]) = (xs, ws, bs) else {
            return Err(Error::shape("conv_transpose2d", &[xs, ws, bs]));
        };
        if cin != cin2 || k != k2 || cout != cout2 || h == 0 || wd == 0 || (h - 1) * stride + k < 2 * pad {
            return Err(Error::shape("conv_transpose2d", &[xs, ws, bs]));
        }
        let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
        let geom = ConvGeom::new(&[n, cout, oh, ow], k, stride, pad)?;
        if geom.out_height() != h || geom.out_width() != wd {
            return Err(Error::shape("conv_transpose2d", &[xs, ws, bs]));
        }
        let p = h * wd;
        let xmat = batch_to_channel_major(self.value(x).data(), n, cin, p);
        let mut cols = vec![T::zero(); geom.cols_len()];
        T::gemm(true, false, geom.patch_len(), cin, n * p, self.value(w).data(), &xmat, &mut cols, false);
        let mut out = geom.col2im(&cols);
        let bias = self.value(b).data();
        let plane = oh * ow;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let c = bias[i % cout];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, xmat }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first]));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        for s in &shapes {
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &shapes));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Propagates d`loss`/d(node) to every attached leaf, adding into the
    /// leaf gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(Tensor::new(&shape, g)?),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::AddRowBias(x, b) => {
                let n = val(*b).len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                }
                send(*x, g.to_vec());
                send(*b, gb);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(false, true, m, n, k, g, val(*b), &mut ga, false);
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(true, false, k, m, n, val(*a), g, &mut gb, false);
                    send(*b, gb);
                }
            }
            Op::Relu(a) => {
                send(*a, g.iter().zip(val(*a)).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect())
            }
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(&g, &y)| g * y).collect()),
            Op::Log(a) => send(*a, g.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect()),
            Op::Square(a) => send(*a, g.iter().zip(val(*a)).map(|(&g, &x)| g * (x + x)).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Softmax(a) => {
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (gy, y) in g.chunks(c).zip(out.chunks(c)) {
                    let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    ga.extend(gy.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
                }
                send(*a, ga);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = &self.nodes[logits.0].value;
                let c = t.shape()[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut gl = t.data().to_vec();
                for (i, row) in gl.chunks_mut(c).enumerate() {
                    softmax_in_place(row);
                    row[labels[i]] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, gl);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.nodes[w.0].value.shape()[0];
                let p = geom.positions();
                let np = geom.batch * p;
                let gmat = batch_to_channel_major(g, geom.batch, o, p);
                if self.rg(*b) {
                    send(*b, gmat.chunks(np).map(|r| r.iter().copied().sum()).collect());
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); o * geom.patch_len()];
                    T::gemm(false, true, o, np, geom.patch_len(), &gmat, cols, &mut gw, false);
                    send(*w, gw);
                }
                if self.rg(*x) {
                    let mut gcols = vec![T::zero(); geom.cols_len()];
                    T::gemm(true, false, geom.patch_len(), o, np, val(*w), &gmat, &mut gcols, false);
                    send(*x, geom.col2im(&gcols));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, xmat } => {
                let cin = self.nodes[x.0].value.shape()[1];
                let cout = geom.channels;
                let np = geom.batch * geom.positions();
                if self.rg(*b) {
                    let plane = geom.height * geom.width;
                    let mut gb = vec![T::zero(); cout];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        gb[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    send(*b, gb);
                }
                let gcols = geom.im2col(g);
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); cin * geom.patch_len()];
                    T::gemm(false, true, cin, np, geom.patch_len(), xmat, &gcols, &mut gw, false);
                    send(*w, gw);
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); cin * np];
                    T::gemm(false, false, cin, geom.patch_len(), np, val(*w), &gcols, &mut gx, false);
                    send(*x, channel_to_batch_major(&gx, geom.batch, cin, geom.positions()));
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs.iter().map(|v| Vec::with_capacity(val(*v).len())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (i, v) in inputs.iter().enumerate() {
                        let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                        parts[i].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (v, part) in inputs.iter().zip(parts) {
                    send(*v, part);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn add_is_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let x = tape.constant(t(&[3, 1], &[0.3, -1.2, 7.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[-1.0]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn relu_kink_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]));
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn stop_gradient_severs_one_path() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 1.0]));
        let sx = tape.stop_gradient(x);
        let p = tape.mul(sx, x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_alone_gives_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -3.0]));
        let sx = tape.stop_gradient(x);
        let ssx = tape.stop_gradient(sx);
        assert_eq!(tape.value(ssx), tape.value(x));
        let loss = tape.sum(ssx);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(m, m).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.5, -2.0]));
        let e = tape.exp(x);
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(tape.cross_entropy(l, &[2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn conv_round_trip_restores_extent() {
        for h in [28usize, 64] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::zeros(&[1, 3, h, h]));
            let w = tape.constant(Tensor::zeros(&[8, 3, 4, 4]));
            let b = tape.constant(Tensor::zeros(&[8]));
            let y = tape.conv2d(x, w, b, 2, 1).unwrap();
            assert_eq!(tape.shape(y), &[1, 8, h / 2, h / 2]);
            let wt = tape.constant(Tensor::zeros(&[8, 3, 4, 4]));
            let bt = tape.constant(Tensor::zeros(&[3]));
            let z = tape.conv_transpose2d(y, wt, bt, 2, 1).unwrap();
            assert_eq!(tape.shape(z), &[1, 3, h, h]);
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[2, 2, 5, 5], |i| ((i * 37 % 17) as f64 - 8.0) / 8.0);
        let wv = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 11 % 7) as f64 - 3.0) / 5.0);
        let bv = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let (x, w, b) = (tape.constant(xv.clone()), tape.constant(wv.clone()), tape.constant(bv.clone()));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 3, 2, 2]);
        let xs = xv.data();
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut acc = bv.data()[o];
                        for c in 0..2 {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        acc += xs[((n * 2 + c) * 5 + iy as usize) * 5 + ix as usize]
                                            * wv.data()[((o * 2 + c) * 4 + ki) * 4 + kj];
                                    }
                                }
                            }
                        }
                        let got = out.data()[((n * 3 + o) * 2 + oy) * 2 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_transpose2d_matches_direct_scatter() {
        let mut tape = Tape::<f64>::new();
        let (h, w_, oh, ow) = (3, 4, 6, 8);
        let xv = Tensor::from_fn(&[2, 2, h, w_], |i| ((i * 29 % 13) as f64 - 6.0) / 6.0);
        let wv = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
        let bv = Tensor::from_f64(&[3], &[0.5, -0.1, 0.2]).unwrap();
        let (x, w, b) = (tape.constant(xv.clone()), tape.constant(wv.clone()), tape.constant(bv.clone()));
        let y = tape.conv_transpose2d(x, w, b, 2, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 3, oh, ow]);
        let mut want = vec![0.0; 2 * 3 * oh * ow];
        for n in 0..2 {
            for o in 0..3 {
                want[(n * 3 + o) * oh * ow..(n * 3 + o + 1) * oh * ow].iter_mut().for_each(|v| *v = bv.data()[o]);
                for c in 0..2 {
                    for iy in 0..h {
                        for ix in 0..w_ {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let oy = (iy * 2 + ki) as isize - 1;
                                    let ox = (ix * 2 + kj) as isize - 1;
                                    if (0..oh as isize).contains(&oy) && (0..ow as isize).contains(&ox) {
                                        want[((n * 3 + o) * oh + oy as usize) * ow + ox as usize] +=
                                            xv.data()[((n * 2 + c) * h + iy) * w_ + ix]
                                                * wv.data()[((c * 3 + o) * 4 + ki) * 4 + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (g, e) in out.data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose2d_of_ones_has_thin_borders() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 7, 7], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv_transpose2d(x, w, b, 2, 1).unwrap();
        let edge = |i: usize| if i == 0 || i == 13 { 1.0 } else { 2.0 };
        for r in 0..14 {
            for c in 0..14 {
                assert_eq!(tape.value(y).data()[r * 14 + c], edge(r) * edge(c));
            }
        }
    }

    #[test]
    fn concat_along_inner_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
