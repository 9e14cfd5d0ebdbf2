//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so node indices are already a
//! topological order. `backward` walks the tape once from the loss towards
//! the leaves.

use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Mask(usize, Vec<f64>),
    LayerNorm(Box<LayerNormTape>),
    Lstm(Box<LstmTape>),
    Sum(usize),
    Mse(usize, usize),
}

#[derive(Debug)]
struct LayerNormTape {
    x: usize,
    gain: usize,
    bias: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Activations saved by the fused LSTM forward pass for backpropagation
/// through time. Gate order is forget, input, candidate, output.
#[derive(Debug)]
struct LstmTape {
    input: usize,
    weights: [usize; 4],
    biases: [usize; 4],
    hidden: usize,
    /// `(L + 1) x hidden`, row 0 is the zero initial state.
    h: Vec<f64>,
    c: Vec<f64>,
    gates: [Vec<f64>; 4],
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Like [`grad`](Self::grad) but zero-filled when no gradient reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Transpose(a.0), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(&[a.0, b.0]);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a.0, s), |x| x * s)
    }

    /// Adds a bias vector (rank 1, or `1 x n`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("add_row", a)?;
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a.0), sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a.0), |x| x * x)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::SoftmaxRows(a.0), rg))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(idx), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(Error::contract(format!(
                "slice_cols range {start}..{end} invalid for {cols} columns"
            )));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(&[rows, w], out)?, Op::SliceCols { src: a.0, start }, rg))
    }

    /// Multiplies elementwise by a fixed mask (used for inverted dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("mask", self.shape(a), &[mask.len()]));
        }
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Mask(a.0, mask), rg))
    }

    /// Per-row normalization `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("layer_norm", x)?;
        if self.value(gain).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(bias)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized[r * cols + c] = n;
                out[r * cols + c] = n * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let tape = LayerNormTape {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            normalized,
            inv_std,
        };
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::LayerNorm(Box::new(tape)), rg))
    }

    /// Unrolls an LSTM over the rows of `input` (`L x in`) from a zero state.
    ///
    /// `weights` are the forget, input, candidate and output gate matrices,
    /// each `hidden x (hidden + in)` and applied to `[h_prev, y]`; `biases`
    /// follow the same order. Returns the `L x hidden` matrix of hidden states.
    pub fn lstm(&mut self, input: Var, weights: [Var; 4], biases: [Var; 4]) -> Result<Var> {
        let (len, n_in) = self.matrix_dims("lstm", input)?;
        let (hidden, z_len) = self.matrix_dims("lstm", weights[0])?;
        if z_len != hidden + n_in {
            return Err(Error::shape("lstm", self.shape(input), self.shape(weights[0])));
        }
        for g in 0..4 {
            if self.shape(weights[g]) != [hidden, z_len] {
                return Err(Error::shape("lstm", self.shape(weights[0]), self.shape(weights[g])));
            }
            if self.value(biases[g]).numel() != hidden {
                return Err(Error::shape("lstm", &[hidden], self.shape(biases[g])));
            }
        }

        let x = self.value(input).data();
        let w: [&[f64]; 4] = std::array::from_fn(|g| self.value(weights[g]).data());
        let b: [&[f64]; 4] = std::array::from_fn(|g| self.value(biases[g]).data());

        let mut h = vec![0.0; (len + 1) * hidden];
        let mut c = vec![0.0; (len + 1) * hidden];
        let mut gates: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; len * hidden]);
        let mut tanh_c = vec![0.0; len * hidden];
        let mut z = vec![0.0; z_len];
        for t in 0..len {
            z[..hidden].copy_from_slice(&h[t * hidden..(t + 1) * hidden]);
            z[hidden..].copy_from_slice(&x[t * n_in..(t + 1) * n_in]);
            for j in 0..hidden {
                let row = j * z_len;
                let pre: [f64; 4] =
                    std::array::from_fn(|g| dot(&w[g][row..row + z_len], &z) + b[g][j]);
                let f = sigmoid_scalar(pre[0]);
                let i = sigmoid_scalar(pre[1]);
                let cand = pre[2].tanh();
                let o = sigmoid_scalar(pre[3]);
                let c_new = f * c[t * hidden + j] + i * cand;
                let tc = c_new.tanh();
                c[(t + 1) * hidden + j] = c_new;
                h[(t + 1) * hidden + j] = o * tc;
                let k = t * hidden + j;
                gates[0][k] = f;
                gates[1][k] = i;
                gates[2][k] = cand;
                gates[3][k] = o;
                tanh_c[k] = tc;
            }
        }
        let out = Tensor::new(&[len, hidden], h[hidden..].to_vec())?;
        let mut deps = vec![input.0];
        deps.extend(weights.iter().chain(&biases).map(|v| v.0));
        let rg = self.rg(&deps);
        let tape = LstmTape {
            input: input.0,
            weights: weights.map(|v| v.0),
            biases: biases.map(|v| v.0),
            hidden,
            h,
            c,
            gates,
            tanh_c,
        };
        Ok(self.push(out, Op::Lstm(Box::new(tape)), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Mean squared difference over every element, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).numel() != self.value(target).numel() {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred.0, target.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred.0, target.0), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from any earlier sweep
    /// are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.zero_grad();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        // Runs `$body` with a zero-initialized gradient buffer for parent
        // `$j`, skipping parents that take no gradient.
        macro_rules! acc {
            ($j:expr, |$buf:ident| $body:block) => {{
                let j = $j;
                if nodes[j].requires_grad {
                    let n = nodes[j].value.numel();
                    let $buf: &mut Vec<f64> = grads[j].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            }};
        }

        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                acc!(*a, |buf| { gemm_bt_acc(g, val(*b), m, n, k, buf) });
                acc!(*b, |buf| { gemm_at_acc(val(*a), g, m, k, n, buf) });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                acc!(*a, |buf| {
                    for x in 0..r {
                        for y in 0..c {
                            buf[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |buf| { add_into(buf, g) });
                acc!(*b, |buf| { add_into(buf, g) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| { add_into(buf, g) });
                acc!(*b, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc!(*a, |buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * y;
                    }
                });
                acc!(*b, |buf| {
                    for ((o, gv), x) in buf.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => acc!(*a, |buf| {
                for (o, gv) in buf.iter_mut().zip(g) {
                    *o += gv * s;
                }
            }),
            Op::AddRow(a, b) => {
                acc!(*a, |buf| { add_into(buf, g) });
                let cols = nodes[*b].value.numel();
                acc!(*b, |buf| {
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Sigmoid(a) => acc!(*a, |buf| {
                for ((o, gv), y) in buf.iter_mut().zip(g).zip(val(i)) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc!(*a, |buf| {
                for ((o, gv), y) in buf.iter_mut().zip(g).zip(val(i)) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => acc!(*a, |buf| {
                for ((o, gv), x) in buf.iter_mut().zip(g).zip(val(*a)) {
                    if *x > 0.0 {
                        *o += gv;
                    }
                }
            }),
            Op::Square(a) => acc!(*a, |buf| {
                for ((o, gv), x) in buf.iter_mut().zip(g).zip(val(*a)) {
                    *o += 2.0 * x * gv;
                }
            }),
            Op::SoftmaxRows(a) => {
                let cols = nodes[i].value.cols();
                acc!(*a, |buf| {
                    for ((o, gr), y) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(val(i).chunks(cols)) {
                        let inner = dot(gr, y);
                        for c in 0..cols {
                            o[c] += y[c] * (gr[c] - inner);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = nodes[i].value.rows();
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    acc!(p, |buf| {
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let rows = nodes[i].value.rows();
                let w = nodes[i].value.cols();
                let cols = nodes[*src].value.cols();
                acc!(*src, |buf| {
                    for r in 0..rows {
                        add_into(
                            &mut buf[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::Mask(a, mask) => acc!(*a, |buf| {
                for ((o, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }),
            Op::LayerNorm(t) => {
                let cols = nodes[i].value.cols();
                let gain = val(t.gain);
                acc!(t.gain, |buf| {
                    for (gr, nr) in g.chunks(cols).zip(t.normalized.chunks(cols)) {
                        for c in 0..cols {
                            buf[c] += gr[c] * nr[c];
                        }
                    }
                });
                acc!(t.bias, |buf| {
                    for gr in g.chunks(cols) {
                        add_into(buf, gr);
                    }
                });
                acc!(t.x, |buf| {
                    let n = cols as f64;
                    let mut dn = vec![0.0; cols];
                    for (r, (gr, nr)) in g.chunks(cols).zip(t.normalized.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            dn[c] = gr[c] * gain[c];
                        }
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n = dot(&dn, nr);
                        let scale = t.inv_std[r] / n;
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += scale * (n * dn[c] - sum_dn - nr[c] * sum_dn_n);
                        }
                    }
                });
            }
            Op::Lstm(t) => self.lstm_backward(t, g, grads),
            Op::Sum(a) => acc!(*a, |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mse(p, t) => {
                let n = nodes[*p].value.numel() as f64;
                let (pv, tv) = (val(*p), val(*t));
                acc!(*p, |buf| {
                    for ((o, a), b) in buf.iter_mut().zip(pv).zip(tv) {
                        *o += 2.0 * (a - b) / n * g[0];
                    }
                });
                acc!(*t, |buf| {
                    for ((o, a), b) in buf.iter_mut().zip(pv).zip(tv) {
                        *o -= 2.0 * (a - b) / n * g[0];
                    }
                });
            }
        }
    }

    fn lstm_backward(&self, t: &LstmTape, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let hidden = t.hidden;
        let x = self.nodes[t.input].value.data();
        let n_in = self.nodes[t.input].value.cols();
        let len = self.nodes[t.input].value.rows();
        let z_len = hidden + n_in;
        let w: [&[f64]; 4] = std::array::from_fn(|k| self.nodes[t.weights[k]].value.data());

        let mut dw: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden * z_len]);
        let mut db: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        let mut dx = vec![0.0; len * n_in];
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        let mut z = vec![0.0; z_len];
        let mut dz = vec![0.0; z_len];

        for step in (0..len).rev() {
            z[..hidden].copy_from_slice(&t.h[step * hidden..(step + 1) * hidden]);
            z[hidden..].copy_from_slice(&x[step * n_in..(step + 1) * n_in]);
            for j in 0..hidden {
                let k = step * hidden + j;
                let (f, ig, cand, o) = (t.gates[0][k], t.gates[1][k], t.gates[2][k], t.gates[3][k]);
                let tc = t.tanh_c[k];
                let dh = g[k] + dh_next[j];
                let d_o = dh * tc;
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                let c_prev = t.c[step * hidden + j];
                da[0][j] = dc * c_prev * f * (1.0 - f);
                da[1][j] = dc * cand * ig * (1.0 - ig);
                da[2][j] = dc * ig * (1.0 - cand * cand);
                da[3][j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dz.iter_mut().for_each(|v| *v = 0.0);
            for gate in 0..4 {
                for j in 0..hidden {
                    let a = da[gate][j];
                    if a == 0.0 {
                        continue;
                    }
                    db[gate][j] += a;
                    let row = j * z_len;
                    let dw_row = &mut dw[gate][row..row + z_len];
                    for (o, zv) in dw_row.iter_mut().zip(&z) {
                        *o += a * zv;
                    }
                    for (o, wv) in dz.iter_mut().zip(&w[gate][row..row + z_len]) {
                        *o += a * wv;
                    }
                }
            }
            dh_next.copy_from_slice(&dz[..hidden]);
            dx[step * n_in..(step + 1) * n_in].copy_from_slice(&dz[hidden..]);
        }

        let mut deposit = |j: usize, contrib: &[f64]| {
            if self.nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![0.0; contrib.len()]);
                add_into(buf, contrib);
            }
        };
        deposit(t.input, &dx);
        for k in 0..4 {
            deposit(t.weights[k], &dw[k]);
            deposit(t.biases[k], &db[k]);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
