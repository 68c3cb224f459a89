//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations run eagerly as they are recorded, so the forward value of every
//! node is available immediately. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients only through nodes that depend on a leaf
//! created with `requires_grad = true`.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-entry boolean mask, `true` means the entry participates.
pub type Mask = Arc<Vec<bool>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Mask>),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectCols { x: Var, cols: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    // Saved forward intermediates (layer norm: normalized input and 1/std per row).
    cache: Vec<f64>,
}

/// Gradients of a scalar output with respect to the graph's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.by_leaf.remove(&leaf)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// Record of primitive operations with their forward values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared(Arc::new(value), requires_grad)
    }

    /// Adds a leaf backed by a shared tensor without copying it.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            cache: Vec::new(),
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.push_cached(value, op, inputs, Vec::new())
    }

    fn push_cached(&mut self, value: Tensor, op: Op, inputs: &[Var], cache: Vec<f64>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            requires_grad: false,
            cache,
        });
        Var(id)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(self.shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok(dims(t))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.check_matrix(op, a)?;
        let db = self.check_matrix(op, b)?;
        if da != db {
            return Err(self.shape_err(op, format!("operand shapes differ: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul", a)?;
        let (k2, n) = self.check_matrix("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dims differ: [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_matrix("transpose", x)?;
        let out = self.value(x).transposed();
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    // ----- elementwise -----

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.check_same(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// `x[r, c] + row[0, c]` for every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("add_row", x)?;
        let (r2, c2) = self.check_matrix("add_row", row)?;
        if r2 != 1 || c2 != c {
            return Err(self.shape_err("add_row", format!("cannot broadcast [{r2},{c2}] over [{r},{c}]")));
        }
        let bias = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data), Op::AddRow(x, row), &[x, row]))
    }

    /// `x[r, c] * col[r, 0]` for every column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("mul_col", x)?;
        let (r2, c2) = self.check_matrix("mul_col", col)?;
        if c2 != 1 || r2 != r {
            return Err(self.shape_err("mul_col", format!("cannot broadcast [{r2},{c2}] over [{r},{c}]")));
        }
        let s = self.value(col).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .zip(s)
            .flat_map(|(chunk, &k)| chunk.iter().map(move |v| v * k))
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data), Op::MulCol(x, col), &[x, col]))
    }

    fn map(&mut self, op_name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.check_matrix(op_name, x)?;
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Ok(self.push(Tensor::matrix(r, c, data), op, &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_matrix("sum", x)?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums each row over its columns: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("sum_cols", x)?;
        let data = self.value(x).data().chunks(c).map(|ch| ch.iter().sum()).collect();
        Ok(self.push(Tensor::matrix(r, 1, data), Op::SumCols(x), &[x]))
    }

    /// Sums each column over its rows: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.check_matrix("sum_rows", x)?;
        let mut acc = vec![0.0; c];
        for ch in self.value(x).data().chunks(c) {
            for (a, v) in acc.iter_mut().zip(ch) {
                *a += v;
            }
        }
        Ok(self.push(Tensor::matrix(1, c, acc), Op::SumRows(x), &[x]))
    }

    // ----- normalization -----

    fn check_mask(&self, op: &'static str, x: Var, mask: &Option<Mask>) -> Result<(usize, usize)> {
        let (r, c) = self.check_matrix(op, x)?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(self.shape_err(op, format!("mask has {} entries for a [{r},{c}] input", m.len())));
            }
        }
        Ok((r, c))
    }

    fn softmax_values(x: &Tensor, mask: &Option<Mask>, log: bool) -> Vec<f64> {
        let (r, c) = dims(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    z += (v - max).exp();
                }
            }
            let log_z = z.ln();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    out[i * c + j] = if log { v - max - log_z } else { (v - max).exp() / z };
                }
            }
        }
        out
    }

    /// Row-wise softmax with max subtraction. Masked entries output 0.
    pub fn softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        let (r, c) = self.check_mask("softmax", x, &mask)?;
        let out = Self::softmax_values(self.value(x), &mask, false);
        Ok(self.push(Tensor::matrix(r, c, out), Op::Softmax(x), &[x]))
    }

    /// Row-wise log-softmax. Masked entries output 0 and receive no gradient.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        let (r, c) = self.check_mask("log_softmax", x, &mask)?;
        let out = Self::softmax_values(self.value(x), &mask, true);
        Ok(self.push(Tensor::matrix(r, c, out), Op::LogSoftmax(x, mask), &[x]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("layer_norm", x)?;
        for p in [gamma, beta] {
            let d = self.check_matrix("layer_norm", p)?;
            if d != (1, c) {
                return Err(self.shape_err("layer_norm", format!("affine parameter {d:?} for width {c}")));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        let mut cache = vec![0.0; r * c + r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            cache[r * c + i] = inv;
            for j in 0..c {
                let xhat = (row[j] - mean) * inv;
                cache[i * c + j] = xhat;
                out[i * c + j] = xhat * g[j] + b[j];
            }
        }
        Ok(self.push_cached(
            Tensor::matrix(r, c, out),
            Op::LayerNorm { x, gamma, beta },
            &[x, gamma, beta],
            cache,
        ))
    }

    // ----- indexing -----

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.check_matrix("gather_rows", table)?;
        if ids.is_empty() {
            return Err(self.shape_err("gather_rows", "no ids given".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(self.shape_err("gather_rows", format!("id {bad} out of range for {r} rows")));
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Ok(self.push(
            Tensor::matrix(ids.len(), c, data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(self.shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data), Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(self.shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let t = self.value(x);
        let data = (0..r)
            .flat_map(|i| t.row(i)[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::matrix(r, len, data), Op::SliceCols { x, start }, &[x]))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.check_matrix("select_cols", x)?;
        if cols.is_empty() || cols.iter().any(|&j| j >= c) {
            return Err(self.shape_err("select_cols", format!("columns {cols:?} of {c}")));
        }
        let t = self.value(x);
        let data = (0..r).flat_map(|i| cols.iter().map(move |&j| t.get(i, j))).collect();
        Ok(self.push(
            Tensor::matrix(r, cols.len(), data),
            Op::SelectCols { x, cols: cols.to_vec() },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "nothing to concatenate".into()));
        }
        let c = self.check_matrix("concat_rows", parts[0])?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, cp) = self.check_matrix("concat_rows", p)?;
            if cp != c {
                return Err(self.shape_err("concat_rows", format!("width {cp} differs from {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        Ok(self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "nothing to concatenate".into()));
        }
        let r = self.check_matrix("concat_cols", parts[0])?.0;
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.check_matrix("concat_cols", p)?;
            if rp != r {
                return Err(self.shape_err("concat_cols", format!("height {rp} differs from {r}")));
            }
            total += cp;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, data), Op::ConcatCols(parts.to_vec()), parts))
    }

    // ----- composites -----

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ----- reverse pass -----

    /// Reverse accumulation from a scalar output to every trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = Gradients::default();
        if !out.needs_grad {
            return Ok(result);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                result
                    .by_leaf
                    .insert(Var(i), Tensor::new(shape, g).expect("gradient shape"));
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(result)
    }

    /// Gradients for the requested leaves; leaves without a path get zeros.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut grads = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                grads.take(v).unwrap_or_else(|| {
                    let t = self.value(v);
                    Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("shape")
                })
            })
            .collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let (r, c) = dims(&node.value);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), 0.0, &mut da);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), 0.0, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let gt = Tensor::matrix(r, c, g.to_vec()).transposed();
                accumulate(grads, *x, gt.into_data());
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                if self.wants(*a) {
                    let d = g.iter().zip(&pick_a).map(|(v, &p)| if p { *v } else { 0.0 }).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(&pick_a).map(|(v, &p)| if p { 0.0 } else { *v }).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*row) {
                    let mut d = vec![0.0; c];
                    for ch in g.chunks(c) {
                        for (a, v) in d.iter_mut().zip(ch) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *row, d);
                }
            }
            Op::MulCol(x, col) => {
                let s = self.value(*col).data();
                if self.wants(*x) {
                    let d = g
                        .chunks(c)
                        .zip(s)
                        .flat_map(|(ch, &k)| ch.iter().map(move |v| v * k))
                        .collect();
                    accumulate(grads, *x, d);
                }
                if self.wants(*col) {
                    let xv = self.value(*x).data();
                    let d = g
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *col, d);
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| {
                        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => accumulate(grads, *x, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect()),
            Op::Exp(x) => accumulate(grads, *x, g.iter().zip(y).map(|(gv, e)| gv * e).collect()),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(xv).map(|(gv, v)| gv / v).collect());
            }
            Op::Sqrt(x) => accumulate(grads, *x, g.iter().zip(y).map(|(gv, s)| gv / (2.0 * s)).collect()),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, v)| if *v >= *lo && *v <= *hi { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumCols(x) => {
                let cx = self.value(*x).cols();
                let d = g.iter().flat_map(|&v| std::iter::repeat(v).take(cx)).collect();
                accumulate(grads, *x, d);
            }
            Op::SumRows(x) => {
                let rx = self.value(*x).rows();
                let d = (0..rx).flat_map(|_| g.iter().copied()).collect();
                accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LogSoftmax(x, mask) => {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| g[i * c + j]).sum();
                    for j in 0..c {
                        if keep(j) {
                            d[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xhat = &node.cache[..r * c];
                let inv = &node.cache[r * c..];
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut d = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    accumulate(grads, *gamma, d);
                }
                if self.wants(*beta) {
                    let mut d = vec![0.0; c];
                    for ch in g.chunks(c) {
                        for (a, v) in d.iter_mut().zip(ch) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *beta, d);
                }
                if self.wants(*x) {
                    let mut d = vec![0.0; r * c];
                    let cf = c as f64;
                    for i in 0..r {
                        let mut sum_dx = 0.0;
                        let mut sum_dx_xhat = 0.0;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gam[j];
                            sum_dx += dxh;
                            sum_dx_xhat += dxh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dxh = g[i * c + j] * gam[j];
                            d[i * c + j] = inv[i] / cf * (cf * dxh - sum_dx - xhat[i * c + j] * sum_dx_xhat);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let mut d = vec![0.0; t.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] += g[k * c + j];
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::SliceRows { x, start } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                d[start * c..(start + r) * c].copy_from_slice(g);
                accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let cx = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).numel()];
                for i in 0..r {
                    d[i * cx + start..i * cx + start + c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                accumulate(grads, *x, d);
            }
            Op::SelectCols { x, cols } => {
                let cx = self.value(*x).cols();
                let mut d = vec![0.0; self.value(*x).numel()];
                for i in 0..r {
                    for (k, &j) in cols.iter().enumerate() {
                        d[i * cx + j] += g[i * c + k];
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let cp = self.value(p).cols();
                    if self.wants(p) {
                        let d = (0..r)
                            .flat_map(|i| g[i * c + col..i * c + col + cp].iter().copied())
                            .collect();
                        accumulate(grads, p, d);
                    }
                    col += cp;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Softmax of a plain slice with max subtraction.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, None).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let s = g.softmax(x, None).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(s).data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.value(s).data()[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(s).data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.gradient(y, &[x]).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::row_vector(vec![0.0, 0.0]), true);
        let lsm = g.log_softmax(logits, None).unwrap();
        let target = g.constant(Tensor::row_vector(vec![-1.0, 0.0]));
        let picked = g.mul(lsm, target).unwrap();
        let loss = g.sum(picked).unwrap();
        let grads = g.gradient(loss, &[logits]).unwrap();
        assert!((grads[0].data()[0] + 0.5).abs() < 1e-15);
        assert!((grads[0].data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row_vector(vec![1.0, 2.0]), true);
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 2") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn masked_softmax_excludes_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![5.0, 0.0, 0.0]));
        let mask = Arc::new(vec![false, true, true]);
        let s = g.softmax(x, Some(mask)).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let x = g.leaf(Tensor::row_vector(vec![1.0, 1.0]), true);
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
    }
}
