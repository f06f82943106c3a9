//! Reverse-mode automatic differentiation over dense row-major f64 matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value, and
//! [`Graph::backward`] walks the tape once in reverse. Parameters live in a
//! [`ParamStore`] and are copied onto the tape with [`Graph::param`].

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    Shape { op: &'static str, a: [usize; 2], b: [usize; 2] },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: [usize; 2], len: usize },
    #[error("{op}: index {index} out of range for {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("backward called twice on the same graph")]
    BackwardTwice,
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = core::result::Result<T, AutodiffError>;

/// Dense row-major matrix. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::DataLength { shape: [rows, cols], len: data.len() });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}

/// `out[m x n] (+)= a[m x k] * b[k x n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += s * y;
            }
        }
    }
}

/// `out[m x n] (+)= a[m x k] * b[n x k]^T`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k x n] (+)= a[m x k]^T * b[m x n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += s * y;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-query key lists for [`Graph::sparse_attention`] in CSR form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnPattern {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl AttnPattern {
    pub fn new() -> Self {
        AttnPattern { offsets: vec![0], keys: Vec::new() }
    }

    /// Appends the key list of the next query.
    pub fn push_query<I: IntoIterator<Item = usize>>(&mut self, keys: I) {
        self.keys.extend(keys);
        self.offsets.push(self.keys.len());
    }

    /// Every query sees every key.
    pub fn dense(n_queries: usize, n_keys: usize) -> Self {
        let mut p = Self::new();
        for _ in 0..n_queries {
            p.push_query(0..n_keys);
        }
        p
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn keys_of(&self, q: usize) -> &[usize] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    fn max_key(&self) -> Option<usize> {
        self.keys.iter().copied().max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, offsets: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Pick { x: Var, idx: Vec<usize> },
    Rotary { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, pattern: Arc<AttnPattern>, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients summed over every use of the parameter on the tape.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let t = &store.tensors[pid.0];
                let slot = out[pid.0].get_or_insert_with(|| Tensor::zeros(t.rows, t.cols));
                for (a, b) in slot.data.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape { op, a: a.shape(), b: b.shape() }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A graph that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false, consumed: false }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {:?}", core::mem::discriminant(&op));
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (used by finite-difference checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        let ng = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: ng });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let ng = self.grad_enabled && store.trainable[id.0];
        self.nodes.push(Node { value: store.tensors[id.0].clone(), op: Op::Param(id), needs_grad: ng });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.cols);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm_nt(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.rows);
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(out, rec, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(shape_err("add_bias", ta, tb));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (x, y) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|x| x * c).collect() };
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|x| x + c).collect() };
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Row-wise normalisation with affine `gamma`, `beta` (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.shape() != [1, tx.cols] || tb.shape() != [1, tx.cols] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let n = tx.cols;
        let mut out = Tensor::zeros(tx.rows, n);
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; tx.rows];
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / math::sqrt(var + EPS);
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out.data[r * n + c] = h * tg.data[c] + tb.data[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..t.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = out.row_mut(r);
            let lse = math::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|v| f(*v)).collect() };
        self.push(out, op, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, math::tanh, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, math::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, math::exp, Op::Exp(x))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows {
                return Err(AutodiffError::Index { op: "embedding", index: id, bound: t.rows });
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows;
        let mut cols = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rows != rows {
                return Err(shape_err("concat_cols", self.value(xs[0]), t));
            }
            cols += t.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &x in xs {
            let t = self.value(x);
            for r in 0..rows {
                out.data[r * cols + c0..r * cols + c0 + t.cols].copy_from_slice(t.row(r));
            }
            c0 += t.cols;
        }
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.cols != cols {
                return Err(shape_err("concat_rows", self.value(xs[0]), t));
            }
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor { rows, cols, data };
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols {
            return Err(AutodiffError::Index { op: "slice_cols", index: start + len, bound: t.cols });
        }
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// `out[i] = x[idx[i]]`; repeated indices accumulate in backward.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            if i >= t.rows {
                return Err(AutodiffError::Index { op: "gather_rows", index: i, bound: t.rows });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Column-wise max over each row segment `offsets[s]..offsets[s+1]`.
    /// Ties go to the first row.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_segments("segment_max", offsets, t.rows)?;
        let n_seg = offsets.len() - 1;
        let mut out = Tensor::zeros(n_seg, t.cols);
        let mut argmax = vec![0; n_seg * t.cols];
        for s in 0..n_seg {
            let (a, b) = (offsets[s], offsets[s + 1]);
            for c in 0..t.cols {
                let mut best = a;
                for r in a + 1..b {
                    if t.get(r, c) > t.get(best, c) {
                        best = r;
                    }
                }
                argmax[s * t.cols + c] = best;
                out.data[s * t.cols + c] = t.get(best, c);
            }
        }
        Ok(self.push(out, Op::SegmentMax { x, argmax }, &[x]))
    }

    /// Max over all rows.
    pub fn reduce_max(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows;
        self.segment_max(x, &[0, n])
    }

    /// Column-wise mean over each row segment.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let t = self.value(x);
        check_segments("segment_mean", offsets, t.rows)?;
        let n_seg = offsets.len() - 1;
        let mut out = Tensor::zeros(n_seg, t.cols);
        for s in 0..n_seg {
            let (a, b) = (offsets[s], offsets[s + 1]);
            let inv = 1.0 / (b - a) as f64;
            for r in a..b {
                for c in 0..t.cols {
                    out.data[s * t.cols + c] += t.get(r, c) * inv;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMean { x, offsets: offsets.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `m x n -> m x 1`
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor { rows: t.rows, cols: 1, data }, Op::RowSum(x), &[x])
    }

    /// `out[r] = x[r, idx[r]]`, as an `m x 1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.len() != t.rows {
            return Err(AutodiffError::Shape { op: "pick", a: t.shape(), b: [idx.len(), 1] });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= t.cols {
                return Err(AutodiffError::Index { op: "pick", index: i, bound: t.cols });
            }
            data.push(t.get(r, i));
        }
        Ok(self.push(Tensor { rows: idx.len(), cols: 1, data }, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Rotates column pairs `(2i, 2i+1)` of row `r` by `angles[r][i]`.
    pub fn rotary(&mut self, x: Var, angles: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.cols % 2 != 0 || angles.rows != t.rows || 2 * angles.cols != t.cols {
            return Err(shape_err("rotary", t, angles));
        }
        let mut cos = Vec::with_capacity(angles.len());
        let mut sin = Vec::with_capacity(angles.len());
        for &a in &angles.data {
            let (s, c) = math::sin_cos(a);
            sin.push(s);
            cos.push(c);
        }
        let mut out = t.clone();
        rotate_pairs(&mut out.data, &cos, &sin, false);
        Ok(self.push(out, Op::Rotary { x, cos, sin }, &[x]))
    }

    /// Multi-head scaled dot-product attention where query `i` sees only the
    /// keys listed in `pattern`. Queries with no keys produce zeros.
    pub fn sparse_attention(&mut self, q: Var, k: Var, v: Var, pattern: Arc<AttnPattern>, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.cols != tk.cols || tk.rows != tv.rows || tk.cols != tv.cols {
            return Err(shape_err("sparse_attention", tq, tk));
        }
        if heads == 0 || tq.cols % heads != 0 {
            return Err(AutodiffError::Invalid(format!("{} columns do not split into {} heads", tq.cols, heads)));
        }
        if pattern.n_queries() != tq.rows {
            return Err(AutodiffError::Shape { op: "sparse_attention", a: tq.shape(), b: [pattern.n_queries(), 0] });
        }
        if let Some(m) = pattern.max_key() {
            if m >= tk.rows {
                return Err(AutodiffError::Index { op: "sparse_attention", index: m, bound: tk.rows });
            }
        }
        let d = tq.cols;
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut out = Tensor::zeros(tq.rows, d);
        let mut probs = vec![0.0; pattern.nnz() * heads];
        for i in 0..tq.rows {
            let keys = pattern.keys_of(i);
            if keys.is_empty() {
                continue;
            }
            let base = pattern.offsets[i];
            for h in 0..heads {
                let qh = &tq.row(i)[h * dh..(h + 1) * dh];
                let p = &mut probs[(base * heads + h * keys.len())..(base * heads + (h + 1) * keys.len())];
                for (slot, &j) in p.iter_mut().zip(keys) {
                    *slot = dot(qh, &tk.row(j)[h * dh..(h + 1) * dh]) * scale;
                }
                softmax_in_place(p);
                let o = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (&pj, &j) in p.iter().zip(keys) {
                    for (x, y) in o.iter_mut().zip(&tv.row(j)[h * dh..(h + 1) * dh]) {
                        *x += pj * y;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, pattern, heads, probs }, &[q, k, v]))
    }

    /// `sum_r w_r * (-log softmax(logits_r)[t_r])` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.rows || weights.len() != t.rows {
            return Err(AutodiffError::Shape { op: "cross_entropy", a: t.shape(), b: [targets.len(), 1] });
        }
        let mut probs = t.data.clone();
        let mut loss = 0.0;
        for r in 0..t.rows {
            if targets[r] >= t.cols {
                return Err(AutodiffError::Index { op: "cross_entropy", index: targets[r], bound: t.cols });
            }
            let row = t.row(r);
            let lse = math::log_sum_exp(row);
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_in_place(&mut probs[r * t.cols..(r + 1) * t.cols]);
        }
        let rec = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), rec, &[logits]))
    }

    /// Reverse pass from a scalar. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            backprop(nodes, i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn check_segments(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != rows {
        return Err(AutodiffError::Invalid(format!("{op}: segment offsets must run from 0 to {rows}")));
    }
    for w in offsets.windows(2) {
        if w[1] <= w[0] {
            return Err(AutodiffError::Invalid(format!("{op}: empty or decreasing segment")));
        }
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn rotate_pairs(data: &mut [f64], cos: &[f64], sin: &[f64], inverse: bool) {
    for (p, (&c, &s)) in cos.iter().zip(sin).enumerate() {
        let s = if inverse { -s } else { s };
        let (a, b) = (data[2 * p], data[2 * p + 1]);
        data[2 * p] = c * a - s * b;
        data[2 * p + 1] = s * a + c * b;
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm_nt(g, &tb.data, ga, ta.rows, tb.cols, ta.cols);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm_tn(&ta.data, g, gb, ta.rows, ta.cols, tb.cols);
            }
        }
        Op::MatMulNT(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                gemm(g, &tb.data, ga, ta.rows, tb.rows, ta.cols);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gemm_tn(g, &ta.data, gb, ta.rows, tb.rows, ta.cols);
            }
        }
        Op::Add(a, b) => {
            for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gv) = acc(grads, nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gv) = acc(grads, nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&val(*a).data, &val(*b).data);
            if let Some(ga) = acc(grads, nodes, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * tb[k];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for k in 0..g.len() {
                    gb[k] += g[k] * ta[k];
                }
            }
        }
        Op::AddBias(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let cols = out.cols;
            if let Some(gb) = acc(grads, nodes, *b) {
                for r in 0..out.rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let n = out.cols;
            let tg = &val(*gamma).data;
            if let Some(gg) = acc(grads, nodes, *gamma) {
                for r in 0..out.rows {
                    for c in 0..n {
                        gg[c] += g[r * n + c] * xhat[r * n + c];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                for r in 0..out.rows {
                    for c in 0..n {
                        gb[c] += g[r * n + c];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..out.rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..n {
                        let dh = g[r * n + c] * tg[c];
                        m1 += dh;
                        m2 += dh * xhat[r * n + c];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for c in 0..n {
                        let dh = g[r * n + c] * tg[c];
                        gx[r * n + c] += rstd[r] * (dh - m1 - xhat[r * n + c] * m2);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = out.cols;
                for r in 0..out.rows {
                    let p = out.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(p, gr);
                    for c in 0..n {
                        gx[r * n + c] += p[c] * (gr[c] - s);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = out.cols;
                for r in 0..out.rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for c in 0..n {
                        gx[r * n + c] += gr[c] - math::exp(out.data[r * n + c]) * s;
                    }
                }
            }
        }
        Op::Gelu(x) | Op::Relu(x) | Op::Tanh(x) | Op::Log(x) | Op::Exp(x) => {
            let xs = &val(*x).data;
            let op = &nodes[i].op;
            if let Some(gx) = acc(grads, nodes, *x) {
                for k in 0..g.len() {
                    let d = match op {
                        Op::Gelu(_) => gelu_grad(xs[k]),
                        Op::Relu(_) => (xs[k] > 0.0) as u8 as f64,
                        Op::Tanh(_) => 1.0 - out.data[k] * out.data[k],
                        Op::Log(_) => 1.0 / xs[k],
                        _ => out.data[k],
                    };
                    gx[k] += g[k] * d;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let n = out.cols;
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..n {
                        gt[id * n + c] += g[r * n + c];
                    }
                }
            }
        }
        Op::ConcatCols(xs) => {
            let mut c0 = 0;
            for &x in xs {
                let w = val(x).cols;
                if let Some(gx) = acc(grads, nodes, x) {
                    for r in 0..out.rows {
                        for c in 0..w {
                            gx[r * w + c] += g[r * out.cols + c0 + c];
                        }
                    }
                }
                c0 += w;
            }
        }
        Op::ConcatRows(xs) => {
            let mut k0 = 0;
            for &x in xs {
                let len = val(x).len();
                if let Some(gx) = acc(grads, nodes, x) {
                    gx.iter_mut().zip(&g[k0..k0 + len]).for_each(|(a, b)| *a += b);
                }
                k0 += len;
            }
        }
        Op::SliceCols { x, start } => {
            let w = val(*x).cols;
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..out.rows {
                    for c in 0..out.cols {
                        gx[r * w + start + c] += g[r * out.cols + c];
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let n = out.cols;
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..n {
                        gx[src * n + c] += g[r * n + c];
                    }
                }
            }
        }
        Op::SegmentMax { x, argmax } => {
            let n = out.cols;
            if let Some(gx) = acc(grads, nodes, *x) {
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src * n + k % n] += g[k];
                }
            }
        }
        Op::SegmentMean { x, offsets } => {
            let n = out.cols;
            if let Some(gx) = acc(grads, nodes, *x) {
                for s in 0..offsets.len() - 1 {
                    let inv = 1.0 / (offsets[s + 1] - offsets[s]) as f64;
                    for r in offsets[s]..offsets[s + 1] {
                        for c in 0..n {
                            gx[r * n + c] += g[s * n + c] * inv;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            let inv = 1.0 / val(*x).len().max(1) as f64;
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0] * inv);
            }
        }
        Op::RowSum(x) => {
            let n = val(*x).cols;
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..out.rows {
                    for c in 0..n {
                        gx[r * n + c] += g[r];
                    }
                }
            }
        }
        Op::Pick { x, idx } => {
            let n = val(*x).cols;
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * n + c] += g[r];
                }
            }
        }
        Op::Rotary { x, cos, sin } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut back = g.to_vec();
                rotate_pairs(&mut back, cos, sin, true);
                gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }
        Op::Attention { q, k, v, pattern, heads, probs } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let d = tq.cols;
            let dh = d / heads;
            let scale = 1.0 / math::sqrt(dh as f64);
            let mut gq = vec![0.0; tq.len()];
            let mut gk = vec![0.0; tk.len()];
            let mut gv = vec![0.0; tv.len()];
            let mut dp = Vec::new();
            for i in 0..tq.rows {
                let keys = pattern.keys_of(i);
                if keys.is_empty() {
                    continue;
                }
                let base = pattern.offsets[i];
                for h in 0..*heads {
                    let p = &probs[(base * heads + h * keys.len())..(base * heads + (h + 1) * keys.len())];
                    let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                    dp.clear();
                    for (&pj, &j) in p.iter().zip(keys) {
                        dp.push(dot(go, &tv.row(j)[h * dh..(h + 1) * dh]));
                        let gvr = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                        gvr.iter_mut().zip(go).for_each(|(a, b)| *a += pj * b);
                    }
                    let s = dot(p, &dp);
                    let qh = &tq.row(i)[h * dh..(h + 1) * dh];
                    for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(keys) {
                        let ds = pj * (dpj - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = &tk.row(j)[h * dh..(h + 1) * dh];
                        let gqr = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                        gqr.iter_mut().zip(kr).for_each(|(a, b)| *a += ds * b);
                        let gkr = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                        gkr.iter_mut().zip(qh).for_each(|(a, b)| *a += ds * b);
                    }
                }
            }
            for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                if let Some(gx) = acc(grads, nodes, var) {
                    gx.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let n = val(*logits).cols;
            if let Some(gx) = acc(grads, nodes, *logits) {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for c in 0..n {
                        let onehot = (c == t) as u8 as f64;
                        gx[r * n + c] += g[0] * w * (probs[r * n + c] - onehot);
                    }
                }
            }
        }
    }
}

/// Named parameter tensors. Names are unique; order is insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(AutodiffError::DuplicateParam(name.into()));
        }
        self.names.push(name.into());
        self.tensors.push(t);
        self.trainable.push(true);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// L2 distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                s += (x - y) * (x - y);
            }
        }
        math::sqrt(s)
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let total = math::sqrt(grads.iter().flatten().map(|g| g.data.iter().map(|v| v * v).sum::<f64>()).sum());
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        grads.iter_mut().flatten().for_each(|g| g.data.iter_mut().for_each(|v| *v *= s));
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: store.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
            v: store.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    /// First and second moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step, m, v }
    }

    /// One bias-corrected Adam update. Parameters without a gradient only
    /// see their moments decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - math::pow(self.beta1, t as f64);
        let c2 = 1.0 - math::pow(self.beta2, t as f64);
        for (k, p) in store.tensors.iter_mut().enumerate() {
            if !store.trainable[k] {
                continue;
            }
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            match grads.get(k).and_then(|g| g.as_ref()) {
                Some(g) => {
                    for i in 0..p.data.len() {
                        let gi = g.data[i] + self.weight_decay * p.data[i];
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p.data[i] -= lr * mh / (math::sqrt(vh) + self.eps);
                    }
                }
                None => {
                    for i in 0..p.data.len() {
                        m[i] *= self.beta1;
                        v[i] *= self.beta2;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p.data[i] -= lr * mh / (math::sqrt(vh) + self.eps);
                    }
                }
            }
        }
    }
}
