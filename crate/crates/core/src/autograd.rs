//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation in evaluation order. Because inputs
//! are always recorded before the nodes that consume them, walking the tape
//! backwards visits each node after all of its consumers, which is the
//! topological order reverse-mode accumulation needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, Transpose};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
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
    /// `a · b` or `a · bᵀ`.
    MatMul { a: Var, b: Var, tb: Transpose },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    /// Adds a constant matrix (attention masks); gradient passes through.
    AddConst { x: Var },
    Softmax { x: Var },
    Gelu { x: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout { x: Var, scale: Vec<T> },
    Gather { table: Var, rows: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation; single-threaded, one per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
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
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Transpose::No,
            self.value(b).data(),
            Transpose::No,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                tb: Transpose::No,
            },
            rg,
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Transpose::No,
            self.value(b).data(),
            Transpose::Yes,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                tb: Transpose::Yes,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).numel() != self.value(b).numel() || self.rc(a) != self.rc(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.value(bias).numel() != n {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (y, &bj) in row.iter_mut().zip(b) {
                *y += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    /// Adds a constant matrix of identical shape, e.g. an additive attention mask.
    pub fn add_const(&mut self, x: Var, constant: &[T]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != constant.len() {
            return Err(dim_err("add_const", v.shape(), &[constant.len()]));
        }
        let data = v.data().iter().zip(constant).map(|(&a, &c)| a + c).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AddConst { x }, rg))
    }

    /// Row-wise softmax. Entries at or below the mask threshold get exactly
    /// zero probability; a row with no other entry is an error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows_kernel(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Exact (erf-based) gelu.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu_scalar(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, d) = self.rc(x);
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, rstd) = layer_norm_stats(self.value(x).data(), m, d, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout with a mask drawn from `seed`. A zero rate records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - rate));
        let v = self.value(x);
        let scale: Vec<T> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, scale }, rg)
    }

    /// Row lookup: output row `i` is `table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    limit: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data)?,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if start + len > r {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                limit: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![len, c], data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if start + len > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.rc(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.rc(p);
            if pc != c {
                return Err(dim_err("concat_rows", &[rows, c], self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.rc(p).0);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rc(p);
            if pr != r {
                return Err(dim_err("concat_cols", &[r, total], self.shape(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Mean label-smoothed cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let m = self.rows_of(logits);
        if targets.len() != m {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if smoothing < T::zero() || smoothing >= T::one() {
            return Err(Error::Config(format!(
                "label smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        let (loss, probs) = cross_entropy_kernel(self.value(logits), targets, smoothing)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    /// Previous gradients on this graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_slice(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.acc(v) {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }

    fn backprop_node(&mut self, id: usize, g: &[T]) {
        // Take the op out so node values can be borrowed alongside grads.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = self.rc(*a);
                let n = self.value(Var(id)).cols();
                if self.rg(*a) {
                    let mut c = vec![T::zero(); m * k];
                    let bt = match tb {
                        Transpose::No => Transpose::Yes,
                        Transpose::Yes => Transpose::No,
                    };
                    gemm(m, n, k, g, Transpose::No, self.value(*b).data(), bt, &mut c, false);
                    self.acc_slice(*a, &c);
                }
                if self.rg(*b) {
                    let mut c = vec![T::zero(); k * n];
                    let av = self.value(*a).data();
                    match tb {
                        Transpose::No => {
                            gemm(k, m, n, av, Transpose::Yes, g, Transpose::No, &mut c, false)
                        }
                        Transpose::Yes => {
                            gemm(n, m, k, g, Transpose::Yes, av, Transpose::No, &mut c, false)
                        }
                    }
                    self.acc_slice(*b, &c);
                }
            }
            Op::Add { a, b } => {
                self.acc_slice(*a, g);
                self.acc_slice(*b, g);
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc_slice(*a, &c);
                }
                if self.rg(*b) {
                    let c: Vec<T> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.acc_slice(*b, &c);
                }
            }
            Op::AddBias { x, bias } => {
                self.acc_slice(*x, g);
                let n = self.value(*bias).numel();
                if let Some(buf) = self.acc(*bias) {
                    for row in g.chunks(n) {
                        for (b, &x) in buf.iter_mut().zip(row) {
                            *b += x;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let c: Vec<T> = g.iter().map(|&a| a * *factor).collect();
                self.acc_slice(*x, &c);
            }
            Op::AddConst { x } => self.acc_slice(*x, g),
            Op::Softmax { x } => {
                let y = &self.nodes[id].value;
                let n = y.cols();
                let mut c = vec![T::zero(); g.len()];
                for ((crow, yrow), grow) in c.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n))
                {
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        crow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.acc_slice(*x, &c);
            }
            Op::Gelu { x } => {
                let c: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| gi * gelu_derivative(xi))
                    .collect();
                self.acc_slice(*x, &c);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                if self.rg(*bias) {
                    let mut c = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for j in 0..d {
                            c[j] += row[j];
                        }
                    }
                    self.acc_slice(*bias, &c);
                }
                if self.rg(*gain) {
                    let mut c = vec![T::zero(); d];
                    for (row, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            c[j] += row[j] * xr[j];
                        }
                    }
                    self.acc_slice(*gain, &c);
                }
                if self.rg(*x) {
                    let gv = self.value(*gain).data();
                    let df = T::of(d as f64);
                    let mut c = vec![T::zero(); g.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((crow, grow), xr)) in c
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        for j in 0..d {
                            crow[j] = rstd[r] / df * (df * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    self.acc_slice(*x, &c);
                }
            }
            Op::Dropout { x, scale } => {
                let c: Vec<T> = g.iter().zip(scale).map(|(&a, &s)| a * s).collect();
                self.acc_slice(*x, &c);
            }
            Op::Gather { table, rows } => {
                let c = self.value(*table).cols();
                if let Some(buf) = self.acc(*table) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                if let Some(buf) = self.acc(*x) {
                    for (b, &v) in buf[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *b += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = self.value(Var(id)).cols();
                if let Some(buf) = self.acc(*x) {
                    for (i, grow) in g.chunks(len).enumerate() {
                        for (j, &v) in grow.iter().enumerate() {
                            buf[i * c + start + j] += v;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc_slice(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.value(Var(id)).cols();
                let mut col = 0;
                for &p in parts {
                    let (r, pc) = self.rc(p);
                    if let Some(buf) = self.acc(p) {
                        for i in 0..r {
                            for j in 0..pc {
                                buf[i * pc + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += pc;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let (m, v) = self.rc(*logits);
                let scale = g[0] / T::of(m as f64);
                let uniform = *smoothing / T::of(v as f64);
                let mut c: Vec<T> = probs.iter().map(|&p| (p - uniform) * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    c[r * v + t] -= (T::one() - *smoothing) * scale;
                }
                self.acc_slice(*logits, &c);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                let c = vec![g[0]; n];
                self.acc_slice(*x, &c);
            }
        }
        self.nodes[id].op = op;
    }
}

// ------------------------------------------------------------- kernels

pub(crate) fn softmax_rows_kernel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.cols();
    let thr = T::masked_threshold();
    let mut out = vec![T::zero(); x.numel()];
    for (r, (orow, xrow)) in out.chunks_mut(n).zip(x.data().chunks(n)).enumerate() {
        let mut max = None::<T>;
        for &v in xrow {
            if v > thr {
                max = Some(max.map_or(v, |m: T| m.max(v)));
            }
        }
        let max = max.ok_or(Error::DegenerateAttention { row: r })?;
        let mut total = T::zero();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            if v > thr {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * std_normal_cdf(x)
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let pdf = (-(x * x) / T::of(2.0)).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
    std_normal_cdf(x) + x * pdf
}

fn layer_norm_stats<T: Scalar>(x: &[T], m: usize, d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let df = T::of(d as f64);
    let mut xhat = vec![T::zero(); m * d];
    let mut rstd = vec![T::zero(); m];
    for r in 0..m {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            xhat[r * d + j] = (row[j] - mean) * rs;
        }
    }
    (xhat, rstd)
}

fn cross_entropy_kernel<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    smoothing: T,
) -> Result<(T, Vec<T>)> {
    let v = logits.cols();
    let m = targets.len();
    let mut probs = vec![T::zero(); m * v];
    let mut loss = T::zero();
    let vf = T::of(v as f64);
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: t,
                limit: v,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        let mut sum_nll = T::zero();
        for j in 0..v {
            probs[r * v + j] = (row[j] - lse).exp();
            sum_nll += lse - row[j];
        }
        let nll = lse - row[t];
        loss += (T::one() - smoothing) * nll + smoothing / vf * sum_nll;
    }
    if m > 0 {
        loss /= T::of(m as f64);
    }
    Ok((loss, probs))
}

// ------------------------------------------------------- eager helpers

/// `a · b` without recording gradients.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.nodes.swap_remove(c.0).value)
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    softmax_rows_kernel(x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&a| gelu_scalar(a)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let gain = g.constant(gain.clone());
    let bias = g.constant(bias.clone());
    let y = g.layer_norm(x, gain, bias, eps)?;
    Ok(g.nodes.swap_remove(y.0).value)
}

/// Mean label-smoothed cross-entropy of `logits` rows against `targets`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], smoothing: T) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets, smoothing)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let x = t(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&id, &x).unwrap(), x);
        let c = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[&[0.0, f64::NEG_INFINITY]])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = softmax_rows(&t(&[&[0.0, f64::MIN]])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = softmax_rows(&t(&[&[2.5, 2.5, 2.5]])).unwrap();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(x_i) / sum_j exp(x_j) evaluated directly
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        let direct: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp() / z).collect();
        let y = softmax_rows(&t(&[&[1.0, 2.0, 3.0]])).unwrap();
        for ((a, b), want) in y.data().iter().zip(&direct).zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-15);
            assert!((a - want).abs() < 5e-6);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let err = softmax_rows(&t(&[&[0.0, 1.0], &[f64::MIN, f64::NEG_INFINITY]])).unwrap_err();
        assert!(matches!(err, Error::DegenerateAttention { row: 1 }));
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&t(&[&[0.0, 1.0]]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        for x in [0.5, 1.0, 2.0] {
            let g = gelu(&t(&[&[x, -x]]));
            let phi = 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()));
            // x·Φ(x) − (−x)·Φ(−x) = x·(Φ(x) + 1 − Φ(x))
            assert!((g.data()[0] - g.data()[1] - x).abs() < 1e-14);
            // x·Φ(x) + (−x)·Φ(−x) = x·(2Φ(x) − 1)
            assert!((g.data()[0] + g.data()[1] - x * (2.0 * phi - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[&[1.0, 1.0]]);
        let zero = t(&[&[0.0, 0.0]]);
        let y = layer_norm(&t(&[&[3.0, 3.0]]), &one, &zero, 1e-12).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = layer_norm(&t(&[&[1.0, 3.0]]), &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let loss = cross_entropy(&t(&[&[0.0, 800.0, 0.0]]), &[1], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        let uniform = Tensor::<f64>::zeros(&[3, 4]);
        let l0 = cross_entropy(&uniform, &[0, 1, 3], 0.0).unwrap();
        let l1 = cross_entropy(&uniform, &[0, 1, 3], 0.1).unwrap();
        assert!((l0 - 4f64.ln()).abs() < 1e-15);
        assert!((l1 - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 4, 1], 0.0),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_seeded() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[4, 8], 1.0));
        assert_eq!(g.dropout(x, 0.0, 1), x);
        let a = g.dropout(x, 0.5, 9);
        let b = g.dropout(x, 0.5, 9);
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[&[2.0, 3.0]]));
        let y = g.mul(w, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut g = Graph::<f64>::new();
            let a = g.param(Tensor::randn(&[5, 4], 1.0, &mut rng));
            let b = g.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
            let c = g.matmul(a, b).unwrap();
            let p = g.softmax_rows(c).unwrap();
            let s = g.cross_entropy(p, &[0, 1, 2, 0, 1], 0.1).unwrap();
            g.backward(s).unwrap();
            (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[&[1.0]]));
        let w = g.param(t(&[&[2.0]]));
        let y = g.mul(a, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0]);
    }
}
