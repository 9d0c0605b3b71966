//! Wengert-list reverse-mode differentiation.
//!
//! Forward ops evaluate eagerly and append a node to the tape; `backward`
//! walks the list in reverse and accumulates vector-Jacobian products. Nodes
//! are appended in evaluation order, so the list is already topologically
//! sorted.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{ensure_finite, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `[m×n] + [n]`, bias broadcast over rows
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    WeightedRowSum { x: Var, weights: Vec<f64> },
    MaskedMaxRows { x: Var, argmax: Vec<usize> },
    Cosine { a: Var, b: Var, norm_a: f64, norm_b: f64 },
    Sum(Var),
    Stack(Vec<Var>),
    Mse { pred: Var, gold: Vec<f64> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Row(..) => "row",
            Op::WeightedRowSum { .. } => "weighted_row_sum",
            Op::MaskedMaxRows { .. } => "masked_max_rows",
            Op::Cosine { .. } => "cosine",
            Op::Sum(..) => "sum",
            Op::Stack(..) => "stack",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require grad or did not influence the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.index)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.index].clone(), g.clone()))
    }

    /// Same as [`get`](Self::get) but zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone()))
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::ShapeMismatch(format!("{op}: {detail}"))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `a[m×k] · b[k×n]` into a fresh buffer.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::DetachedRoot);
        }
        self.nodes.get(v.index).ok_or(Error::DetachedRoot)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(&data, op.kind())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op, requires_grad });
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    fn mat(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| shape_err(op, format!("expected matrix, got {:?}", self.value(v).shape())))
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (m, k) = self.mat(a, "matmul_bt")?;
        let (n, k2) = self.mat(b, "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMulBt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.kind();
        self.check(&[a, b])?;
        self.same_shape(a, b, name)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        self.push(self.value(a).shape().to_vec(), out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(&[x, bias])?;
        let (m, n) = self.mat(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(shape_err("add_row", format!("bias of {} for {n} columns", self.value(bias).numel())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(vec![m, n], out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a constant (dropout masks and the like).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        self.check(&[x])?;
        if factors.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", format!("{} factors for {} values", factors.len(), self.value(x).numel())));
        }
        let out = self.value(x).data().iter().zip(&factors).map(|(v, f)| v * f).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::MulConst(x, factors), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(&[x])?;
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.value(x).shape())));
        }
        let out = self.value(x).data().to_vec();
        self.push(shape, out, Op::Reshape(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let (m, n) = self.mat(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
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
        self.push(vec![m, n], out, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row normalization to zero mean and unit population variance,
    /// followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (m, n) = self.mat(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err("layer_norm", format!("gamma/beta must have {n} entries")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for (row, orow) in xhat.chunks_mut(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv;
                orow[j] = g[j] * *v + b[j];
            }
        }
        self.push(vec![m, n], out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        self.push(self.value(x).shape().to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Selects rows of `table[v×d]` by id, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let (v, d) = self.mat(table, "gather")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IdOutOfRange { id, vocab_size: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[x])?;
        let (m, n) = self.mat(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {n}", start + len)));
        }
        let xs = self.value(x).data();
        let out = (0..m).flat_map(|i| xs[i * n + start..i * n + start + len].iter().copied()).collect();
        self.push(vec![m, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let (m, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.check(&[x])?;
        let (m, n) = self.mat(x, "row")?;
        if i >= m {
            return Err(shape_err("row", format!("row {i} of {m}")));
        }
        let out = self.value(x).row(i).to_vec();
        self.push(vec![n], out, Op::Row(x, i), &[x])
    }

    /// `Σ_i w_i · x[i, :]`, a vector of length `n`.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        self.check(&[x])?;
        let (m, n) = self.mat(x, "weighted_row_sum")?;
        if weights.len() != m {
            return Err(shape_err("weighted_row_sum", format!("{} weights for {m} rows", weights.len())));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&xs[i * n..(i + 1) * n]) {
                *o += w * v;
            }
        }
        self.push(vec![n], out, Op::WeightedRowSum { x, weights }, &[x])
    }

    /// Per-column maximum over the rows where `keep[i]` is set.
    pub fn masked_max_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        self.check(&[x])?;
        let (m, n) = self.mat(x, "masked_max_rows")?;
        if keep.len() != m {
            return Err(shape_err("masked_max_rows", format!("{} mask entries for {m} rows", keep.len())));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::AllMasked);
        }
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for i in (0..m).filter(|&i| keep[i]) {
            for j in 0..n {
                let v = xs[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        self.push(vec![n], out, Op::MaskedMaxRows { x, argmax }, &[x])
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if av.len() != bv.len() {
            return Err(shape_err("cosine", format!("{} vs {}", av.len(), bv.len())));
        }
        let norm_a = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_b = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_a < 1e-12 || norm_b < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let c = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
        self.push(Vec::new(), vec![c], Op::Cosine { a, b, norm_a, norm_b }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.value(x).data().iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Packs single-element nodes into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        self.check(scalars)?;
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            out.push(self.value(s).item().ok_or_else(|| {
                shape_err("stack", format!("expected scalar, got {:?}", self.value(s).shape()))
            })?);
        }
        self.push(vec![scalars.len()], out, Op::Stack(scalars.to_vec()), scalars)
    }

    /// Mean squared error of `pred` against constant targets.
    pub fn mse(&mut self, pred: Var, gold: &[f64]) -> Result<Var> {
        self.check(&[pred])?;
        let p = self.value(pred).data();
        if p.len() != gold.len() {
            return Err(Error::LengthMismatch { left: p.len(), right: gold.len() });
        }
        if p.is_empty() {
            return Err(Error::Empty);
        }
        ensure_finite(gold, "mse targets")?;
        let loss = p.iter().zip(gold).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Vec::new(), vec![loss], Op::Mse { pred, gold: gold.to_vec() }, &[pred])
    }

    /// Reverse pass from a scalar root. Gradients from several paths into
    /// one node are summed in reverse tape order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::NotScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        if root_node.requires_grad {
            grads[root.index] = Some(vec![1.0]);
        }
        let numel = |v: Var| self.nodes[v.index].value.numel();
        for idx in (0..=root.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let rg = |v: Var| self.nodes[v.index].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.index].value.dims2()?;
                    let n = node.value.shape()[1];
                    if rg(*a) {
                        // dA = G · Bᵀ
                        let da = matmul_bt_raw(&g, self.nodes[b.index].value.data(), m, n, k);
                        add_into(accumulate(&mut grads[a.index], m * k), &da);
                    }
                    if rg(*b) {
                        // dB = Aᵀ · G
                        let db = matmul_at_raw(self.nodes[a.index].value.data(), &g, m, k, n);
                        add_into(accumulate(&mut grads[b.index], k * n), &db);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.nodes[a.index].value.dims2()?;
                    let n = node.value.shape()[1];
                    if rg(*a) {
                        // dA = G · B
                        let da = matmul_raw(&g, self.nodes[b.index].value.data(), m, n, k);
                        add_into(accumulate(&mut grads[a.index], m * k), &da);
                    }
                    if rg(*b) {
                        // dB = Gᵀ · A
                        let db = matmul_at_raw(&g, self.nodes[a.index].value.data(), m, n, k);
                        add_into(accumulate(&mut grads[b.index], n * k), &db);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if rg(*v) {
                            add_into(accumulate(&mut grads[v.index], g.len()), &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        add_into(accumulate(&mut grads[a.index], g.len()), &g);
                    }
                    if rg(*b) {
                        let gb = accumulate(&mut grads[b.index], g.len());
                        for (o, v) in gb.iter_mut().zip(&g) {
                            *o -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[a.index].value.data(), self.nodes[b.index].value.data());
                    if rg(*a) {
                        let ga = accumulate(&mut grads[a.index], g.len());
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gv * y;
                        }
                    }
                    if rg(*b) {
                        let gb = accumulate(&mut grads[b.index], g.len());
                        for ((o, gv), x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gv * x;
                        }
                    }
                }
                Op::AddRow(x, bias) => {
                    let n = numel(*bias);
                    if rg(*x) {
                        add_into(accumulate(&mut grads[x.index], g.len()), &g);
                    }
                    if rg(*bias) {
                        let gb = accumulate(&mut grads[bias.index], n);
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if rg(*x) {
                        let gx = accumulate(&mut grads[x.index], g.len());
                        for (o, v) in gx.iter_mut().zip(&g) {
                            *o += c * v;
                        }
                    }
                }
                Op::MulConst(x, f) => {
                    if rg(*x) {
                        let gx = accumulate(&mut grads[x.index], g.len());
                        for ((o, v), fv) in gx.iter_mut().zip(&g).zip(f) {
                            *o += v * fv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    if rg(*x) {
                        add_into(accumulate(&mut grads[x.index], g.len()), &g);
                    }
                }
                Op::SoftmaxRows(x) => {
                    if rg(*x) {
                        let n = node.value.shape()[1];
                        let y = node.value.data();
                        let gx = accumulate(&mut grads[x.index], g.len());
                        for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                                *o += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let n = numel(*gamma);
                    let gam = self.nodes[gamma.index].value.data();
                    if rg(*beta) {
                        let gb = accumulate(&mut grads[beta.index], n);
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                    if rg(*gamma) {
                        let gg = accumulate(&mut grads[gamma.index], n);
                        for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((o, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                                *o += gv * xv;
                            }
                        }
                    }
                    if rg(*x) {
                        let gx = accumulate(&mut grads[x.index], g.len());
                        for (((gr, xr), or), inv) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).zip(inv_std) {
                            let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for ((o, d), xv) in or.iter_mut().zip(&dxhat).zip(xr) {
                                *o += inv * (d - mean_d - xv * mean_dx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if rg(*x) {
                        let xv = self.nodes[x.index].value.data();
                        let gx = accumulate(&mut grads[x.index], g.len());
                        for ((o, gv), v) in gx.iter_mut().zip(&g).zip(xv) {
                            *o += gv * gelu_grad_scalar(*v);
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    if rg(*table) {
                        let d = self.nodes[table.index].value.shape()[1];
                        let gt = accumulate(&mut grads[table.index], numel(*table));
                        for (row, &id) in g.chunks(d).zip(ids) {
                            add_into(&mut gt[id * d..(id + 1) * d], row);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if rg(*x) {
                        let n = self.nodes[x.index].value.shape()[1];
                        let len = node.value.shape()[1];
                        let gx = accumulate(&mut grads[x.index], numel(*x));
                        for (i, row) in g.chunks(len).enumerate() {
                            add_into(&mut gx[i * n + start..i * n + start + len], row);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.index].value.shape()[1];
                        if rg(*p) {
                            let gp = accumulate(&mut grads[p.index], numel(*p));
                            for (i, orow) in gp.chunks_mut(w).enumerate() {
                                add_into(orow, &g[i * n + offset..i * n + offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Row(x, i) => {
                    if rg(*x) {
                        let n = g.len();
                        let gx = accumulate(&mut grads[x.index], numel(*x));
                        add_into(&mut gx[i * n..(i + 1) * n], &g);
                    }
                }
                Op::WeightedRowSum { x, weights } => {
                    if rg(*x) {
                        let n = g.len();
                        let gx = accumulate(&mut grads[x.index], numel(*x));
                        for (i, &w) in weights.iter().enumerate() {
                            for (o, gv) in gx[i * n..(i + 1) * n].iter_mut().zip(&g) {
                                *o += w * gv;
                            }
                        }
                    }
                }
                Op::MaskedMaxRows { x, argmax } => {
                    if rg(*x) {
                        let n = g.len();
                        let gx = accumulate(&mut grads[x.index], numel(*x));
                        for (j, &i) in argmax.iter().enumerate() {
                            gx[i * n + j] += g[j];
                        }
                    }
                }
                Op::Cosine { a, b, norm_a, norm_b } => {
                    let c = node.value.data()[0];
                    let (av, bv) = (self.nodes[a.index].value.data(), self.nodes[b.index].value.data());
                    let gs = g[0];
                    if rg(*a) {
                        let ga = accumulate(&mut grads[a.index], av.len());
                        for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                            *o += gs * (y / (norm_a * norm_b) - c * x / (norm_a * norm_a));
                        }
                    }
                    if rg(*b) {
                        let gb = accumulate(&mut grads[b.index], bv.len());
                        for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                            *o += gs * (x / (norm_a * norm_b) - c * y / (norm_b * norm_b));
                        }
                    }
                }
                Op::Sum(x) => {
                    if rg(*x) {
                        let gx = accumulate(&mut grads[x.index], numel(*x));
                        for o in gx.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::Stack(parts) => {
                    for (p, gv) in parts.iter().zip(&g) {
                        if rg(*p) {
                            accumulate(&mut grads[p.index], 1)[0] += gv;
                        }
                    }
                }
                Op::Mse { pred, gold } => {
                    if rg(*pred) {
                        let p = self.nodes[pred.index].value.data();
                        let scale = 2.0 * g[0] / p.len() as f64;
                        let gp = accumulate(&mut grads[pred.index], p.len());
                        for ((o, a), b) in gp.iter_mut().zip(p).zip(gold) {
                            *o += scale * (a - b);
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { shapes, grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
