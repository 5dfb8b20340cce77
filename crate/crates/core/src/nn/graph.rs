//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and backward is a single reverse sweep. Every
//! reduction runs in a fixed index order.

use crate::error::{invalid, Result};

use super::kernels;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} holds {n} values, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// `[rows x cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(invalid(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Abs(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Db(Var),
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    RowMean(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        base: f64,
    },
    TokenScale {
        x: Var,
        eps: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A recording of one forward computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(invalid(format!("matmul: shape mismatch [{m}, {k}] x [{k2}, {n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `[m x n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(bias).numel() != n {
            return Err(invalid(format!(
                "add_row_bias: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b[c];
            }
        }
        Ok(self.derived(
            Tensor::from_parts(vec![m, n], data),
            Op::AddRowBias(a, bias),
            &[a, bias],
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.derived(Tensor::from_parts(shape, data), op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.map(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// `20 log10(max(x, floor))` with the magnitude floor.
    pub fn db(&mut self, a: Var) -> Var {
        self.map(a, crate::grid::linear_to_db, Op::Db(a))
    }

    /// Softmax over the last dimension of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let out = kernels::softmax_rows(self.value(a).data(), m, n);
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::Softmax(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        Ok(self.derived(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(invalid(format!(
                "reshape: shape mismatch {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.derived(Tensor::from_parts(shape, data), Op::Reshape(a), &[a]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(invalid(format!("slice_cols: {start}+{len} exceeds {n} columns")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.derived(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { src: a, start },
            &[a],
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if start + len > m {
            return Err(invalid(format!("slice_rows: {start}+{len} exceeds {m} rows")));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.derived(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows { src: a, start },
            &[a],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols: no inputs"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(invalid(format!(
                    "concat_cols: shape mismatch {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.derived(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Mean of each row, shape `[m]`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a).data();
        let out = (0..m)
            .map(|r| src[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.derived(Tensor::from_parts(vec![m], out), Op::RowMean(a), &[a]))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.derived(Tensor::scalar(v), Op::Mean(a), &[a])
    }

    /// 1-D convolution along rows. `x: [L x Cin]`, `w: [Cout x Cin x K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (len, cin) = self.dims2(x)?;
        let (cout, wcin, k) = kernels::conv_weight_dims(self.shape(w))?;
        if wcin != cin || self.value(b).numel() != cout || stride == 0 {
            return Err(invalid(format!(
                "conv1d: shape mismatch input {:?}, weight {:?}, bias {:?}, stride {stride}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let out_len = kernels::conv_out_len(len, k, stride, pad)
            .ok_or_else(|| invalid(format!("conv1d: input length {len} too short for kernel {k}")))?;
        let out = kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            len,
            cin,
            cout,
            k,
            stride,
            pad,
        );
        Ok(self.derived(
            Tensor::from_parts(vec![out_len, cout], out),
            Op::Conv1d { x, w, b, stride, pad },
            &[x, w, b],
        ))
    }

    /// Transposed 1-D convolution. `x: [L x Cin]`, `w: [Cin x Cout x K]`, `b: [Cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (len, cin) = self.dims2(x)?;
        let (wcin, cout, k) = kernels::conv_weight_dims(self.shape(w))?;
        if wcin != cin || self.value(b).numel() != cout || stride == 0 {
            return Err(invalid(format!(
                "conv_transpose1d: shape mismatch input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let full = (len - 1) * stride + k;
        if full <= 2 * pad {
            return Err(invalid("conv_transpose1d: padding removes the whole output"));
        }
        let out_len = full - 2 * pad;
        let out = kernels::conv_transpose1d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            len,
            cin,
            cout,
            k,
            stride,
            pad,
        );
        Ok(self.derived(
            Tensor::from_parts(vec![out_len, cout], out),
            Op::ConvTranspose1d { x, w, b, stride, pad },
            &[x, w, b],
        ))
    }

    /// Rotary embedding of each row by its position.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        kernels::check_rope(m, d, positions)?;
        let out = kernels::rope(self.value(x).data(), m, d, positions, base, false);
        Ok(self.derived(
            Tensor::from_parts(vec![m, d], out),
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
            &[x],
        ))
    }

    /// Per-row RMS scaling without mean subtraction.
    pub fn token_scale(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, c) = self.dims2(x)?;
        let out = kernels::token_scale(self.value(x).data(), m, c, eps);
        Ok(self.derived(Tensor::from_parts(vec![m, c], out), Op::TokenScale { x, eps }, &[x]))
    }

    /// Reverse sweep from a scalar; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
                if let Some(g) = &adj[i] {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.requires_grad(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    self.accumulate(adj, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    self.accumulate(adj, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(adj, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(adj, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(adj, *a, g.to_vec());
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for (j, x) in g.iter().enumerate() {
                    gb[j % n] += x;
                }
                self.accumulate(adj, *bias, gb);
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.iter().map(|x| c * x).collect()),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(
                    adj,
                    *a,
                    g.iter().zip(av).map(|(x, &v)| x * kernels::gelu_grad(v)).collect(),
                );
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                let s = |v: f64| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(adj, *a, g.iter().zip(av).map(|(x, &v)| x * s(v)).collect());
            }
            Op::Sqrt(a) => {
                let gr = g
                    .iter()
                    .zip(out)
                    .map(|(x, &y)| if y > 0.0 { x / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, gr);
            }
            Op::ClampMin(a, lo) => {
                let av = self.value(*a).data();
                self.accumulate(
                    adj,
                    *a,
                    g.iter().zip(av).map(|(x, &v)| if v > *lo { *x } else { 0.0 }).collect(),
                );
            }
            Op::Db(a) => {
                let av = self.value(*a).data();
                let k = 20.0 / std::f64::consts::LN_10;
                let gr = g
                    .iter()
                    .zip(av)
                    .map(|(x, &v)| {
                        if v > crate::grid::MAGNITUDE_FLOOR {
                            x * k / v
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(adj, *a, gr);
            }
            Op::Softmax(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut gr = vec![0.0; m * n];
                for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gr[r * n + c] = y[c] * (gy[c] - dot);
                    }
                }
                self.accumulate(adj, *a, gr);
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                self.accumulate(adj, *a, kernels::transpose(g, n, m));
            }
            Op::Reshape(a) => self.accumulate(adj, *a, g.to_vec()),
            Op::SliceCols { src, start } => {
                let (m, n) = self.value(*src).dims2().unwrap();
                let len = g.len() / m.max(1);
                let mut gr = vec![0.0; m * n];
                for r in 0..m {
                    gr[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(adj, *src, gr);
            }
            Op::SliceRows { src, start } => {
                let (m, n) = self.value(*src).dims2().unwrap();
                let mut gr = vec![0.0; m * n];
                gr[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(adj, *src, gr);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gr = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gr.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(adj, p, gr);
                    off += w;
                }
            }
            Op::RowMean(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let mut gr = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        gr[r * n + c] = g[r] / n as f64;
                    }
                }
                self.accumulate(adj, *a, gr);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, vec![g[0] / n as f64; n]);
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (len, cin) = self.value(*x).dims2().unwrap();
                let (cout, _, k) = kernels::conv_weight_dims(self.shape(*w)).unwrap();
                let (gx, gw, gb) = kernels::conv1d_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    len,
                    cin,
                    cout,
                    k,
                    *stride,
                    *pad,
                );
                self.accumulate(adj, *x, gx);
                self.accumulate(adj, *w, gw);
                self.accumulate(adj, *b, gb);
            }
            Op::ConvTranspose1d { x, w, b, stride, pad } => {
                let (len, cin) = self.value(*x).dims2().unwrap();
                let (_, cout, k) = kernels::conv_weight_dims(self.shape(*w)).unwrap();
                let (gx, gw, gb) = kernels::conv_transpose1d_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    len,
                    cin,
                    cout,
                    k,
                    *stride,
                    *pad,
                );
                self.accumulate(adj, *x, gx);
                self.accumulate(adj, *w, gw);
                self.accumulate(adj, *b, gb);
            }
            Op::Rope { x, positions, base } => {
                let (m, d) = self.value(*x).dims2().unwrap();
                self.accumulate(adj, *x, kernels::rope(g, m, d, positions, *base, true));
            }
            Op::TokenScale { x, eps } => {
                let (m, c) = self.value(*x).dims2().unwrap();
                self.accumulate(
                    adj,
                    *x,
                    kernels::token_scale_backward(g, self.value(*x).data(), m, c, *eps),
                );
            }
        }
    }
}
